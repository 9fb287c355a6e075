"""
Duplex DNN execution engine.

A frozen backbone (conv -> folded normalization -> ReLU blocks) runs next to a
trainable branch of reversible blocks

    y2 = x2 + F1(x1)
    y1 = x1 + F2(y2)

with F = ReLU(conv). The pooled output of backbone block l is added to the x2
stream entering branch block l + 1, the last one to the final y2. Because the
injections are kept, the branch inverts block by block during the backward
pass and only the final (y1, y2) must be retained.

Variants:
    DuDNN  reversible branch, backbone injected at every block
    FI     same arithmetic, but the backward pass reads stored activations
    CA     branch fed only from the backbone's final output
    BO     branch alone

Every function takes an optional BfpConfig. When given, activations and
gradients are rounded through BFP storage where they are produced.
"""
import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from app.services.bfp import BfpConfig, fake_quantize
from app.services.conv import (
    avg_pool,
    batch_norm,
    batch_norm_grad,
    conv2d,
    conv2d_input_grad,
    conv2d_weight_grad,
    pooled_size,
    project_channels,
    relu,
)

logger = logging.getLogger(__name__)

# reader(tensor, residency) -> tensor as read back from storage
TensorReader = Callable[[np.ndarray, str], np.ndarray]

_STREAM_BRANCH = 0
_STREAM_BACKBONE = 1
_STREAM_STEM = 2
_STREAM_CHAIN_STEM = 3
_STREAM_PROJECTION = 10


class ShapeMismatchError(Exception):
    """Raised when tensors or parameters do not fit together."""


class SpecError(Exception):
    """Raised for invalid model descriptions or unknown variants."""


class Variant(str, Enum):
    DUDNN = "DuDNN"
    FI = "FI"
    CA = "CA"
    BO = "BO"


@dataclass
class ResidualFuncParams:
    weight: np.ndarray
    scale: Optional[np.ndarray] = None
    shift: Optional[np.ndarray] = None
    batch_norm: bool = False

    @property
    def kernel(self) -> int:
        return int(self.weight.shape[-1])

    @property
    def in_channels(self) -> int:
        return int(self.weight.shape[1])

    @property
    def out_channels(self) -> int:
        return int(self.weight.shape[0])


@dataclass
class ReversibleBlockParams:
    f1: ResidualFuncParams
    f2: ResidualFuncParams


@dataclass
class DuDnnSpec:
    variant: Variant
    image_shape: tuple
    backbone: list
    branch: list
    stem: np.ndarray
    stem_pool: int
    pool_factors: list
    projections: list
    head_weight: np.ndarray
    head_bias: np.ndarray
    seed: int = 0

    @property
    def num_blocks(self) -> int:
        return len(self.branch)

    @property
    def branch_channels(self) -> int:
        return self.branch[0].f1.out_channels

    @property
    def num_classes(self) -> int:
        return int(self.head_weight.shape[0])

    @property
    def branch_size(self) -> int:
        return pooled_size(self.image_shape[1], self.stem_pool)

    @property
    def connections(self) -> list:
        """Backbone blocks whose pooled output is injected into the branch."""
        if self.variant in (Variant.DUDNN, Variant.FI):
            return list(range(1, len(self.backbone) + 1))
        return []

    @property
    def backbone_links(self) -> int:
        """Number of backbone outputs the branch consumes (the CA stem counts once)."""
        if self.variant is Variant.CA:
            return 1
        return len(self.connections)


@dataclass
class GradientBundle:
    s: np.ndarray
    m: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    x1: Optional[np.ndarray] = None
    x2: Optional[np.ndarray] = None


@dataclass
class SavedBlock:
    """Activations an irreversible block keeps for its backward pass."""
    x1: np.ndarray
    y2: np.ndarray
    f1_out: np.ndarray
    f2_out: np.ndarray

    def tensors(self) -> list:
        return [self.x1, self.y2, self.f1_out, self.f2_out]


@dataclass
class RetainedState:
    y1: np.ndarray
    y2: np.ndarray
    features: np.ndarray
    injections: list = field(default_factory=list)
    saved: list = field(default_factory=list)

    def transient_tensors(self) -> list:
        tensors = [self.y1, self.y2, self.features]
        for block in self.saved:
            tensors.extend(block.tensors())
        return tensors

    def static_tensors(self) -> list:
        return list(self.injections)


def _quantize(t: np.ndarray, bfp: Optional[BfpConfig]) -> np.ndarray:
    if bfp is None:
        return t
    return fake_quantize(t, axis=1 if t.ndim > 1 else 0, cfg=bfp)


def _read(reader: Optional[TensorReader], t: np.ndarray, residency: str) -> np.ndarray:
    return t if reader is None else reader(t, residency)


# ---------------------------------------------------------------------------
# Residual functions
# ---------------------------------------------------------------------------

def pre_activation(x: np.ndarray, p: ResidualFuncParams) -> np.ndarray:
    if x.shape[1] != p.in_channels:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels, weights expect {p.in_channels}"
        )
    pre = conv2d(x, p.weight)
    if p.batch_norm:
        pre, _ = batch_norm(pre)
    elif p.scale is not None:
        pre = pre * p.scale[None, :, None, None] + p.shift[None, :, None, None]
    return pre


def func_forward(x: np.ndarray, p: ResidualFuncParams,
                 bfp: Optional[BfpConfig] = None) -> np.ndarray:
    return _quantize(relu(pre_activation(x, p)), bfp)


def _conv_output_grad(d: np.ndarray, out: np.ndarray, p: ResidualFuncParams,
                      x: Optional[np.ndarray]) -> np.ndarray:
    # ReLU mask from the recomputed pre-activation; BFP can round small positive outputs to zero
    if x is not None:
        dpre = d * (pre_activation(x, p) > 0)
    else:
        dpre = d * (out > 0)
    if p.batch_norm:
        if x is None:
            raise SpecError("batch-normalized residual functions need their input for the gradient")
        xhat, inv_std = batch_norm(conv2d(x, p.weight))
        return batch_norm_grad(dpre, xhat, inv_std)
    if p.scale is not None:
        return dpre * p.scale[None, :, None, None]
    return dpre


def func_input_grad(d: np.ndarray, out: np.ndarray, p: ResidualFuncParams,
                    x: Optional[np.ndarray] = None) -> np.ndarray:
    """U^a: gradient w.r.t. the input of F given the gradient `d` w.r.t. its output."""
    return conv2d_input_grad(_conv_output_grad(d, out, p, x), p.weight)


def func_weight_grad(d: np.ndarray, out: np.ndarray, x: np.ndarray,
                     p: ResidualFuncParams) -> np.ndarray:
    """U^w: gradient w.r.t. the conv weights of F."""
    return conv2d_weight_grad(_conv_output_grad(d, out, p, x), x, p.kernel)


# ---------------------------------------------------------------------------
# Reversible block
# ---------------------------------------------------------------------------

def _check_pair(a: np.ndarray, b: np.ndarray, params: ReversibleBlockParams):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"stream shapes differ: {a.shape} vs {b.shape}")
    for name, p in (("F1", params.f1), ("F2", params.f2)):
        if p.in_channels != a.shape[1] or p.out_channels != a.shape[1]:
            raise ShapeMismatchError(
                f"{name} maps {p.in_channels}->{p.out_channels} channels, "
                f"streams carry {a.shape[1]}"
            )


def forward_block(x1: np.ndarray, x2: np.ndarray, params: ReversibleBlockParams,
                  bfp: Optional[BfpConfig] = None):
    _check_pair(x1, x2, params)
    y2 = _quantize(x2 + func_forward(x1, params.f1, bfp), bfp)
    y1 = _quantize(x1 + func_forward(y2, params.f2, bfp), bfp)
    return y1, y2


def invert_block(y1: np.ndarray, y2: np.ndarray, params: ReversibleBlockParams,
                 bfp: Optional[BfpConfig] = None):
    _check_pair(y1, y2, params)
    x1 = _quantize(y1 - func_forward(y2, params.f2, bfp), bfp)
    x2 = _quantize(y2 - func_forward(x1, params.f1, bfp), bfp)
    return x1, x2


def backward_block(g1: np.ndarray, g2: np.ndarray, y1: np.ndarray, y2: np.ndarray,
                   params: ReversibleBlockParams,
                   bfp: Optional[BfpConfig] = None) -> GradientBundle:
    """
    Recompute the block input from its output and back-propagate.

    g1, g2 are the loss gradients w.r.t. y1 and y2. Returns s (w.r.t. x1),
    m (w.r.t. x2), the weight gradients and the recovered (x1, x2).
    """
    _check_pair(y1, y2, params)
    if g1.shape != y1.shape or g2.shape != y2.shape:
        raise ShapeMismatchError("gradient shapes do not match the block outputs")
    f2_out = func_forward(y2, params.f2, bfp)
    x1 = _quantize(y1 - f2_out, bfp)
    m = _quantize(g2 + func_input_grad(g1, f2_out, params.f2, y2), bfp)
    q2 = _quantize(func_weight_grad(g1, f2_out, y2, params.f2), bfp)
    f1_out = func_forward(x1, params.f1, bfp)
    x2 = _quantize(y2 - f1_out, bfp)
    s = _quantize(g1 + func_input_grad(m, f1_out, params.f1, x1), bfp)
    q1 = _quantize(func_weight_grad(m, f1_out, x1, params.f1), bfp)
    return GradientBundle(s=s, m=m, q1=q1, q2=q2, x1=x1, x2=x2)


def _forward_block_saved(x1: np.ndarray, x2: np.ndarray, params: ReversibleBlockParams,
                         bfp: Optional[BfpConfig]):
    _check_pair(x1, x2, params)
    f1_out = func_forward(x1, params.f1, bfp)
    y2 = _quantize(x2 + f1_out, bfp)
    f2_out = func_forward(y2, params.f2, bfp)
    y1 = _quantize(x1 + f2_out, bfp)
    return y1, y2, SavedBlock(x1=x1, y2=y2, f1_out=f1_out, f2_out=f2_out)


def storing_backward_block(g1: np.ndarray, g2: np.ndarray, saved: SavedBlock,
                           params: ReversibleBlockParams,
                           bfp: Optional[BfpConfig] = None) -> GradientBundle:
    """Backward pass of the same block from stored activations (no inversion)."""
    m = _quantize(g2 + func_input_grad(g1, saved.f2_out, params.f2, saved.y2), bfp)
    q2 = _quantize(func_weight_grad(g1, saved.f2_out, saved.y2, params.f2), bfp)
    s = _quantize(g1 + func_input_grad(m, saved.f1_out, params.f1, saved.x1), bfp)
    q1 = _quantize(func_weight_grad(m, saved.f1_out, saved.x1, params.f1), bfp)
    return GradientBundle(s=s, m=m, q1=q1, q2=q2)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def _zero_sum(k) -> np.ndarray:
    k = np.asarray(k, dtype=np.float64)
    return k - k.mean()


# oriented texture detectors for the first backbone block
_TEXTURE_BANK = np.stack([
    _zero_sum([[-1, -1, -1], [2, 2, 2], [-1, -1, -1]]),
    _zero_sum([[-1, 2, -1], [-1, 2, -1], [-1, 2, -1]]),
    _zero_sum([[1, -1, 1], [-1, 1, -1], [1, -1, 1]]),
    _zero_sum([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]]),
    _zero_sum([[-1, -1, 2], [-1, 2, -1], [2, -1, -1]]),
    _zero_sum([[0, -1, 0], [-1, 4, -1], [0, -1, 0]]),
])


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _fixed_matrix(rows: int, cols: int, seed: int, stream: int) -> np.ndarray:
    return _rng(seed, stream).normal(size=(rows, cols)) / np.sqrt(cols)


def fixed_backbone(in_channels: int, channels: int, num_blocks: int, kernel: int = 3,
                   seed: int = 0) -> list:
    """
    Deterministic frozen backbone.

    Block 1 is a bank of zero-sum texture detectors applied to the channel
    sum of the image; deeper blocks mix channels with a random orthogonal
    centre tap. Normalization is folded into a per-channel scale.
    """
    if kernel != 3:
        raise SpecError("the fixed backbone uses 3x3 kernels")
    rng = _rng(seed, _STREAM_BACKBONE)
    blocks = []
    first = np.zeros((channels, in_channels, 3, 3))
    for o in range(channels):
        sign = -1.0 if (o // len(_TEXTURE_BANK)) % 2 else 1.0
        first[o, :] = sign * _TEXTURE_BANK[o % len(_TEXTURE_BANK)] / in_channels
    norms = np.sqrt(np.sum(first ** 2, axis=(1, 2, 3)))
    blocks.append(ResidualFuncParams(weight=first, scale=1.0 / norms, shift=np.zeros(channels)))
    for _ in range(1, num_blocks):
        q, _ = np.linalg.qr(rng.normal(size=(channels, channels)))
        w = np.zeros((channels, channels, 3, 3))
        w[:, :, 1, 1] = q
        blocks.append(ResidualFuncParams(weight=w, scale=np.ones(channels), shift=np.zeros(channels)))
    return blocks


def make_spec(in_channels: int = 1, image_size: int = 8, num_blocks: int = 4,
              backbone_channels: int = 4, branch_channels: int = 4, num_classes: int = 3,
              pool_factor: int = 2, kernel: int = 3, branch_norm: bool = False,
              variant=Variant.DUDNN, seed: int = 0) -> DuDnnSpec:
    """Build a DuDNN model, then derive `variant` from it."""
    if min(in_channels, image_size, num_blocks, backbone_channels,
           branch_channels, num_classes, pool_factor) < 1:
        raise SpecError("model dimensions must be positive")
    if kernel % 2 == 0:
        raise SpecError(f"kernel must be odd, got {kernel}")
    rng = _rng(seed, _STREAM_BRANCH)

    def branch_func() -> ResidualFuncParams:
        fan_in = branch_channels * kernel * kernel
        w = rng.normal(size=(branch_channels, branch_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return ResidualFuncParams(weight=w, batch_norm=branch_norm)

    branch = [ReversibleBlockParams(f1=branch_func(), f2=branch_func()) for _ in range(num_blocks)]
    projections = [
        None if backbone_channels == branch_channels
        else _fixed_matrix(branch_channels, backbone_channels, seed, _STREAM_PROJECTION + l)
        for l in range(num_blocks)
    ]
    base = DuDnnSpec(
        variant=Variant.DUDNN,
        image_shape=(in_channels, image_size, image_size),
        backbone=fixed_backbone(in_channels, backbone_channels, num_blocks, kernel, seed),
        branch=branch,
        stem=_fixed_matrix(2 * branch_channels, in_channels, seed, _STREAM_STEM),
        stem_pool=pool_factor,
        pool_factors=[pool_factor] * num_blocks,
        projections=projections,
        head_weight=np.zeros((num_classes, 2 * branch_channels)),
        head_bias=np.zeros(num_classes),
        seed=seed,
    )
    logger.debug("Built %d-block DuDNN spec (seed=%d)", num_blocks, seed)
    return build_variant(base, variant)


def build_variant(base: DuDnnSpec, variant) -> DuDnnSpec:
    """Derive a baseline architecture; learnable parameters are copied unchanged."""
    try:
        variant = Variant(variant)
    except ValueError as e:
        raise SpecError(f"unknown variant: {variant!r}") from e
    if variant != base.variant and base.variant not in (Variant.DUDNN, Variant.FI):
        raise SpecError(f"cannot derive {variant.value} from a {base.variant.value} model")
    spec = copy.deepcopy(base)
    spec.variant = variant
    if variant is Variant.CA and base.variant is not Variant.CA:
        backbone_channels = spec.backbone[-1].out_channels
        spec.stem = _fixed_matrix(2 * spec.branch_channels, backbone_channels,
                                  spec.seed, _STREAM_CHAIN_STEM)
        spec.projections = []
    elif variant is Variant.BO:
        spec.backbone = []
        spec.projections = []
    return spec


def learnable_params(spec: DuDnnSpec) -> dict:
    """Named views of the trainable arrays; in-place updates change the model."""
    params = {}
    for l, block in enumerate(spec.branch, start=1):
        params[f"branch.{l}.f1.weight"] = block.f1.weight
        params[f"branch.{l}.f2.weight"] = block.f2.weight
    params["head.weight"] = spec.head_weight
    params["head.bias"] = spec.head_bias
    return params


def frozen_params(spec: DuDnnSpec) -> dict:
    params = {"stem": spec.stem}
    for l, p in enumerate(spec.backbone, start=1):
        params[f"backbone.{l}.weight"] = p.weight
        params[f"backbone.{l}.scale"] = p.scale
        params[f"backbone.{l}.shift"] = p.shift
    for l, proj in enumerate(spec.projections, start=1):
        if proj is not None:
            params[f"projection.{l}"] = proj
    return params


def count_learnable(spec: DuDnnSpec) -> dict:
    return {name: int(arr.size) for name, arr in learnable_params(spec).items()}


# ---------------------------------------------------------------------------
# Whole-network passes
# ---------------------------------------------------------------------------

def _check_batch(spec: DuDnnSpec, batch: np.ndarray):
    if batch.ndim != 4 or tuple(batch.shape[1:]) != tuple(spec.image_shape):
        raise ShapeMismatchError(
            f"batch shape {batch.shape} does not match image shape {spec.image_shape}"
        )


def backbone_forward(spec: DuDnnSpec, batch: np.ndarray,
                     bfp: Optional[BfpConfig] = None) -> list:
    outputs = []
    z = batch
    for p in spec.backbone:
        z = func_forward(z, p, bfp)
        outputs.append(z)
    return outputs


def inject(spec: DuDnnSpec, z: np.ndarray, l: int, bfp: Optional[BfpConfig] = None) -> np.ndarray:
    """Pooled, channel-projected output of backbone block l."""
    u = avg_pool(z, spec.pool_factors[l - 1])
    proj = spec.projections[l - 1] if spec.projections else None
    if proj is not None:
        u = project_channels(u, proj)
    expected = (spec.branch_channels, spec.branch_size, spec.branch_size)
    if tuple(u.shape[1:]) != expected:
        raise ShapeMismatchError(f"injection {l} has shape {u.shape[1:]}, branch expects {expected}")
    return _quantize(u, bfp)


def stem_inputs(spec: DuDnnSpec, batch: np.ndarray, backbone_out: list,
                bfp: Optional[BfpConfig] = None):
    source = backbone_out[-1] if spec.variant is Variant.CA else batch
    x0 = project_channels(avg_pool(source, spec.stem_pool), spec.stem)
    c = spec.branch_channels
    return _quantize(x0[:, :c], bfp), _quantize(x0[:, c:], bfp)


def _features(y1: np.ndarray, y2: np.ndarray) -> np.ndarray:
    return np.concatenate([y1.mean(axis=(2, 3)), y2.mean(axis=(2, 3))], axis=1)


def dudnn_forward(spec: DuDnnSpec, batch: np.ndarray, bfp: Optional[BfpConfig] = None):
    """Run backbone and branch. Returns (logits, RetainedState)."""
    _check_batch(spec, batch)
    backbone_out = backbone_forward(spec, batch, bfp)
    x1, x2 = stem_inputs(spec, batch, backbone_out, bfp)
    injections = [inject(spec, backbone_out[l - 1], l, bfp) for l in spec.connections]
    saved = []
    for l, block in enumerate(spec.branch, start=1):
        if injections and l >= 2:
            x2 = _quantize(x2 + injections[l - 2], bfp)
        if spec.variant is Variant.FI:
            x1, x2, record = _forward_block_saved(x1, x2, block, bfp)
            saved.append(record)
        else:
            x1, x2 = forward_block(x1, x2, block, bfp)
    if injections:
        x2 = _quantize(x2 + injections[-1], bfp)
    features = _features(x1, x2)
    logits = features @ spec.head_weight.T + spec.head_bias
    state = RetainedState(y1=x1, y2=x2, features=features, injections=injections, saved=saved)
    return logits, state


def head_backward(spec: DuDnnSpec, state: RetainedState, dlogits: np.ndarray,
                  bfp: Optional[BfpConfig] = None, reader: Optional[TensorReader] = None):
    """Classifier-head gradients plus the gradients w.r.t. the final (y1, y2)."""
    if dlogits.shape != (state.features.shape[0], spec.num_classes):
        raise ShapeMismatchError(f"loss gradient shape {dlogits.shape} does not match the head")
    features = _read(reader, state.features, "transient")
    grads = {
        "head.weight": _quantize(dlogits.T @ features, bfp),
        "head.bias": _quantize(dlogits.sum(axis=0), bfp),
    }
    dfeat = dlogits @ spec.head_weight
    c = spec.branch_channels
    h, w = state.y1.shape[2:]
    g1 = np.broadcast_to(dfeat[:, :c, None, None] / (h * w), state.y1.shape).copy()
    g2 = np.broadcast_to(dfeat[:, c:, None, None] / (h * w), state.y2.shape).copy()
    return grads, _quantize(g1, bfp), _quantize(g2, bfp)


def dudnn_backward(spec: DuDnnSpec, state: RetainedState, dlogits: np.ndarray,
                   bfp: Optional[BfpConfig] = None,
                   reader: Optional[TensorReader] = None) -> dict:
    """Gradients for every branch weight and the head; the backbone gets none."""
    if spec.variant is Variant.FI and len(state.saved) != spec.num_blocks:
        raise ShapeMismatchError("retained state does not hold one record per block")
    grads, g1, g2 = head_backward(spec, state, dlogits, bfp, reader)
    y1, y2 = state.y1, state.y2
    if state.injections:
        y2 = y2 - state.injections[-1]
    for l in range(spec.num_blocks, 0, -1):
        block = spec.branch[l - 1]
        if spec.variant is Variant.FI:
            record = state.saved[l - 1]
            record = SavedBlock(*(_read(reader, t, "stored") for t in record.tensors()))
            bundle = storing_backward_block(g1, g2, record, block, bfp)
        else:
            y1 = _read(reader, y1, "transient")
            y2 = _read(reader, y2, "transient")
            bundle = backward_block(g1, g2, y1, y2, block, bfp)
            y1, y2 = bundle.x1, bundle.x2
            if state.injections and l >= 2:
                y2 = y2 - state.injections[l - 2]
        grads[f"branch.{l}.f1.weight"] = bundle.q1
        grads[f"branch.{l}.f2.weight"] = bundle.q2
        g1, g2 = bundle.s, bundle.m
    return grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def classify(spec: DuDnnSpec, batch: np.ndarray, bfp: Optional[BfpConfig] = None) -> np.ndarray:
    logits, _ = dudnn_forward(spec, batch, bfp)
    return np.argmax(logits, axis=1)
