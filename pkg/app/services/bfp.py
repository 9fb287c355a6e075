"""
Block floating point (BFP) codec and group arithmetic.

A group stores one biased shared exponent followed by `group_size` lanes, each
lane a sign bit and an unsigned mantissa with an explicit leading bit. The
default 4/5/9 layout packs a group into 4 + 9 * (5 + 1) = 58 bits.

Encoding takes the largest element exponent as the shared exponent, aligns
every mantissa to it and truncates toward zero. Exponents outside the
representable range are clamped; values below the shared window flush to 0.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class BfpEncodingError(Exception):
    """Raised when values cannot be encoded (non-finite, empty or mis-sized input)."""


@dataclass(frozen=True)
class BfpConfig:
    exp_bits: int = 4
    man_bits: int = 5
    group_size: int = 9
    exp_bias: Optional[int] = None

    def __post_init__(self):
        if self.exp_bits < 1 or self.man_bits < 1 or self.group_size < 1:
            raise ValueError(
                f"invalid BFP layout: exp_bits={self.exp_bits}, "
                f"man_bits={self.man_bits}, group_size={self.group_size}"
            )
        if self.exp_bias is None:
            object.__setattr__(self, "exp_bias", (1 << (self.exp_bits - 1)) - 1)

    @property
    def encoded_size_bits(self) -> int:
        return self.exp_bits + self.group_size * (self.man_bits + 1)

    @property
    def bits_per_value(self) -> float:
        return self.encoded_size_bits / self.group_size

    @property
    def min_exp(self) -> int:
        return -self.exp_bias

    @property
    def max_exp(self) -> int:
        return (1 << self.exp_bits) - 1 - self.exp_bias

    @property
    def max_mantissa(self) -> int:
        return (1 << self.man_bits) - 1

    @property
    def man_scale(self) -> int:
        # explicit leading bit: a normalized mantissa encodes [1, 2)
        return self.man_bits - 1


DEFAULT_CONFIG = BfpConfig()


@dataclass(frozen=True)
class BfpGroup:
    shared_exp: int
    signs: tuple
    mantissas: tuple

    @property
    def is_zero(self) -> bool:
        return not any(self.mantissas)


@dataclass(frozen=True)
class GroupDot:
    value: float
    zero_operand: bool
    gated_lanes: int


@dataclass(frozen=True, eq=False)
class BfpTensor:
    shape: tuple
    axis: int
    exps: np.ndarray
    signs: np.ndarray
    mantissas: np.ndarray
    pad_count: int
    config: BfpConfig = DEFAULT_CONFIG

    @property
    def num_groups(self) -> int:
        return int(self.exps.shape[0])

    @property
    def size_bits(self) -> int:
        return self.num_groups * self.config.encoded_size_bits

    @property
    def groups(self) -> list:
        return [
            BfpGroup(int(e), tuple(int(s) for s in sg), tuple(int(m) for m in mg))
            for e, sg, mg in zip(self.exps, self.signs, self.mantissas)
        ]


def _encode_array(groups: np.ndarray, cfg: BfpConfig):
    """Encode an (n, group_size) array. Returns biased exps, signs, mantissas."""
    if not np.all(np.isfinite(groups)):
        raise BfpEncodingError("cannot encode non-finite values")
    mag = np.abs(groups)
    _, frexp_exps = np.frexp(mag)
    elem_exp = np.where(mag > 0, frexp_exps - 1, cfg.min_exp)
    shared = np.clip(elem_exp.max(axis=1), cfg.min_exp, cfg.max_exp).astype(np.int32)
    ulp = np.ldexp(1.0, shared - cfg.man_scale)
    mantissas = np.minimum(np.floor(mag / ulp[:, None]), cfg.max_mantissa).astype(np.int64)
    # a lane truncated to zero keeps no sign so re-encoding is bit-stable
    signs = ((groups < 0) & (mantissas > 0)).astype(np.int64)
    return (shared + cfg.exp_bias).astype(np.int64), signs, mantissas


def _decode_array(exps: np.ndarray, signs: np.ndarray, mantissas: np.ndarray,
                  cfg: BfpConfig) -> np.ndarray:
    ulp = np.ldexp(1.0, (exps - cfg.exp_bias - cfg.man_scale).astype(np.int32))
    values = mantissas * ulp[:, None]
    return np.where(signs == 1, -values, values)


def encode_group(values: Sequence[float], cfg: BfpConfig = DEFAULT_CONFIG) -> BfpGroup:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size != cfg.group_size:
        raise BfpEncodingError(f"expected {cfg.group_size} values, got {arr.size}")
    exps, signs, mantissas = _encode_array(arr[None, :], cfg)
    return BfpGroup(
        shared_exp=int(exps[0]),
        signs=tuple(int(s) for s in signs[0]),
        mantissas=tuple(int(m) for m in mantissas[0]),
    )


def decode_group(group: BfpGroup, cfg: BfpConfig = DEFAULT_CONFIG) -> np.ndarray:
    return _decode_array(
        np.array([group.shared_exp], dtype=np.int64),
        np.array([group.signs], dtype=np.int64),
        np.array([group.mantissas], dtype=np.int64),
        cfg,
    )[0]


def dot_groups(a: BfpGroup, b: BfpGroup, cfg: BfpConfig = DEFAULT_CONFIG) -> GroupDot:
    """Integer mantissa dot product with a single exponent addition."""
    zero_operand = a.is_zero or b.is_zero
    acc = 0
    gated = 0
    for sa, ma, sb, mb in zip(a.signs, a.mantissas, b.signs, b.mantissas):
        if ma == 0 or mb == 0:
            gated += 1
            continue
        product = ma * mb
        acc += -product if sa ^ sb else product
    scale = a.shared_exp + b.shared_exp - 2 * (cfg.exp_bias + cfg.man_scale)
    return GroupDot(
        value=math.ldexp(float(acc), scale),
        zero_operand=zero_operand,
        gated_lanes=0 if zero_operand else gated,
    )


def quantize_tensor(t, axis: int = -1, cfg: BfpConfig = DEFAULT_CONFIG) -> BfpTensor:
    """Tile `axis` into groups of `cfg.group_size`, zero-padding the last group of each row."""
    arr = np.asarray(t, dtype=np.float64)
    if arr.size == 0:
        raise BfpEncodingError("cannot quantize an empty tensor")
    axis = axis % arr.ndim
    moved = np.moveaxis(arr, axis, -1)
    width = moved.shape[-1]
    pad = (-width) % cfg.group_size
    rows = moved.reshape(-1, width)
    if pad:
        rows = np.pad(rows, ((0, 0), (0, pad)))
    exps, signs, mantissas = _encode_array(rows.reshape(-1, cfg.group_size), cfg)
    return BfpTensor(
        shape=tuple(arr.shape),
        axis=axis,
        exps=exps,
        signs=signs,
        mantissas=mantissas,
        pad_count=pad,
        config=cfg,
    )


def dequantize_tensor(bt: BfpTensor) -> np.ndarray:
    width = bt.shape[bt.axis]
    values = _decode_array(bt.exps, bt.signs, bt.mantissas, bt.config)
    values = values.reshape(-1, width + bt.pad_count)[:, :width]
    moved_shape = tuple(d for i, d in enumerate(bt.shape) if i != bt.axis) + (width,)
    return np.moveaxis(values.reshape(moved_shape), -1, bt.axis)


def fake_quantize(t, axis: int = 1, cfg: BfpConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Round-trip a tensor through BFP storage."""
    return dequantize_tensor(quantize_tensor(t, axis, cfg))


def group_to_bits(group: BfpGroup, cfg: BfpConfig = DEFAULT_CONFIG) -> int:
    """Shared exponent in the top bits, then (sign, mantissa) lanes, lane 0 first."""
    word = group.shared_exp
    for sign, mantissa in zip(group.signs, group.mantissas):
        word = (word << (cfg.man_bits + 1)) | (sign << cfg.man_bits) | mantissa
    return word


def group_from_bits(word: int, cfg: BfpConfig = DEFAULT_CONFIG) -> BfpGroup:
    if word < 0 or word >> cfg.encoded_size_bits:
        raise BfpEncodingError(f"word does not fit in {cfg.encoded_size_bits} bits")
    lane_bits = cfg.man_bits + 1
    lanes = []
    for _ in range(cfg.group_size):
        lanes.append(word & ((1 << lane_bits) - 1))
        word >>= lane_bits
    lanes.reverse()
    return BfpGroup(
        shared_exp=word,
        signs=tuple(lane >> cfg.man_bits for lane in lanes),
        mantissas=tuple(lane & cfg.max_mantissa for lane in lanes),
    )


def group_to_bytes(group: BfpGroup, cfg: BfpConfig = DEFAULT_CONFIG) -> bytes:
    return group_to_bits(group, cfg).to_bytes((cfg.encoded_size_bits + 7) // 8, "big")


def group_from_bytes(data: bytes, cfg: BfpConfig = DEFAULT_CONFIG) -> BfpGroup:
    return group_from_bits(int.from_bytes(data, "big"), cfg)
