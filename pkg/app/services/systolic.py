"""
Cycle and energy model of the BFP systolic array.

Every processing element (PE) multiplies two BFP groups per cycle. Three
dataflows are modeled:

    WS_FORWARD              weights stay in the PEs, activations stream in
                            from the left, partial sums flow down
    WS_BACKWARD_TRANSPOSED  the same with the stream direction reversed
                            (the transpose happens in place, same cost)
    ACCUM_STATIONARY        outputs accumulate in place, both operands
                            stream in and results drain left at the end

Gating happens at two checkpoints: a pair is skipped when either group holds
only zero mantissas; otherwise lanes whose mantissa is zero in either
operand have their multiplier gated.

`cycles()` is the closed-form count; `simulate_grid()` is a register-level
simulation of the same array that serves as its reference.
"""
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from app.services.bfp import DEFAULT_CONFIG, BfpConfig, BfpGroup, dot_groups, encode_group

logger = logging.getLogger(__name__)


class Dataflow(str, Enum):
    WS_FORWARD = "WS_FORWARD"
    WS_BACKWARD_TRANSPOSED = "WS_BACKWARD_TRANSPOSED"
    ACCUM_STATIONARY = "ACCUM_STATIONARY"


@dataclass(frozen=True)
class ArrayConfig:
    rows: int = 6
    cols: int = 6
    clock_hz: float = 5e8
    dataflow: Dataflow = Dataflow.WS_FORWARD
    group_size: int = 9
    preload_cycles: Optional[int] = None
    drain_cycles: Optional[int] = None

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1 or self.group_size < 1:
            raise ValueError(f"invalid array geometry {self.rows}x{self.cols}, group {self.group_size}")
        if self.clock_hz <= 0:
            raise ValueError("clock must be positive")
        if self.preload_cycles is not None and self.preload_cycles < self.rows:
            raise ValueError("weight preload needs at least one cycle per row")
        if self.drain_cycles is not None and self.drain_cycles < self.cols:
            raise ValueError("accumulator drain needs at least one cycle per column")

    @property
    def macs_per_cycle(self) -> int:
        return self.rows * self.cols * self.group_size

    @property
    def preload(self) -> int:
        return self.rows if self.preload_cycles is None else self.preload_cycles

    @property
    def drain(self) -> int:
        return self.cols if self.drain_cycles is None else self.drain_cycles


def throughput(cfg: ArrayConfig) -> float:
    """Peak MACs per second."""
    return cfg.rows * cfg.cols * cfg.group_size * cfg.clock_hz


@dataclass(frozen=True)
class MatmulJob:
    """C[M, N] = A[M, K] . B[K, N] with K counted in BFP groups."""
    m: int
    k: int
    n: int
    zero_group_fraction: float = 0.0
    zero_mantissa_fraction: float = 0.0
    dataflow: Optional[Dataflow] = None
    name: str = ""

    def __post_init__(self):
        if min(self.m, self.k, self.n) < 1:
            raise ValueError(f"matmul dims must be >= 1, got {self.m}x{self.k}x{self.n}")
        for frac in (self.zero_group_fraction, self.zero_mantissa_fraction):
            if not 0.0 <= frac <= 1.0:
                raise ValueError(f"sparsity fraction {frac} outside [0, 1]")

    @property
    def group_pairs(self) -> int:
        return self.m * self.k * self.n

    def total_macs(self, group_size: int = 9) -> int:
        return self.group_pairs * group_size

    def to_dict(self) -> dict:
        row = asdict(self)
        row["dataflow"] = self.dataflow.value if self.dataflow else None
        return row


@dataclass
class PeStats:
    """Lane-operation counts by gating outcome."""
    macs_executed: float = 0
    zero_group_skips: float = 0
    mantissa_gates: float = 0

    @property
    def total(self) -> float:
        return self.macs_executed + self.zero_group_skips + self.mantissa_gates

    def record(self, result, group_size: int):
        if result.zero_operand:
            self.zero_group_skips += group_size
        else:
            self.mantissa_gates += result.gated_lanes
            self.macs_executed += group_size - result.gated_lanes

    def __add__(self, other: "PeStats") -> "PeStats":
        return PeStats(
            self.macs_executed + other.macs_executed,
            self.zero_group_skips + other.zero_group_skips,
            self.mantissa_gates + other.mantissa_gates,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EnergyConstants:
    active: float = 1.0
    gated: float = 0.25
    skipped: float = 0.05
    register_write: float = 0.0

    def __post_init__(self):
        if not 0 <= self.skipped <= self.gated <= self.active:
            raise ValueError("PE energies must satisfy skipped <= gated <= active")


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def cycles(job: MatmulJob, cfg: ArrayConfig, mode: str = "analytical") -> int:
    if mode == "analytical":
        return _ceil_div(job.total_macs(cfg.group_size), cfg.macs_per_cycle)
    if mode != "detailed":
        raise ValueError(f"unknown timing mode: {mode!r}")
    dataflow = job.dataflow or cfg.dataflow
    fill = cfg.rows + cfg.cols - 2
    if dataflow is Dataflow.ACCUM_STATIONARY:
        tiles = _ceil_div(job.m, cfg.rows) * _ceil_div(job.n, cfg.cols)
        return tiles * (job.k + fill + cfg.drain)
    tiles = _ceil_div(job.k, cfg.rows) * _ceil_div(job.n, cfg.cols)
    return tiles * (cfg.preload + job.m + fill)


def conv_job(batch: int, in_channels: int, out_channels: int, height: int, width: int,
             kernel: int, role: str = "forward", group_size: int = 9,
             zero_group_fraction: float = 0.0, zero_mantissa_fraction: float = 0.0) -> MatmulJob:
    """
    Lower a stride-1 convolution pass to a matmul.

    forward      M = B*H*W, K = C_in*k^2 groups, N = C_out   (weight stationary)
    input_grad   M = B*H*W, K = C_out*k^2 groups, N = C_in   (transposed weights)
    weight_grad  M = C_out, K = B*H*W groups, N = C_in*k^2   (accumulation stationary)
    """
    pixels = batch * height * width
    taps = kernel * kernel
    if role == "forward":
        m, k, n, flow = pixels, _ceil_div(in_channels * taps, group_size), out_channels, Dataflow.WS_FORWARD
    elif role == "input_grad":
        m, k, n = pixels, _ceil_div(out_channels * taps, group_size), in_channels
        flow = Dataflow.WS_BACKWARD_TRANSPOSED
    elif role == "weight_grad":
        m, k, n = out_channels, _ceil_div(pixels, group_size), in_channels * taps
        flow = Dataflow.ACCUM_STATIONARY
    else:
        raise ValueError(f"unknown conv role: {role!r}")
    return MatmulJob(m, k, n, zero_group_fraction, zero_mantissa_fraction, flow, role)


def gating_stats(a_stream: Sequence[BfpGroup], b_stream: Sequence[BfpGroup],
                 cfg: BfpConfig = DEFAULT_CONFIG) -> PeStats:
    if len(a_stream) != len(b_stream):
        raise ValueError("operand streams are not aligned")
    stats = PeStats()
    for a, b in zip(a_stream, b_stream):
        stats.record(dot_groups(a, b, cfg), cfg.group_size)
    return stats


def estimate_stats(job: MatmulJob, group_size: int = 9) -> PeStats:
    """Expected gating counts from the job's sparsity fractions."""
    lanes = job.total_macs(group_size)
    skipped = lanes * job.zero_group_fraction
    gated = (lanes - skipped) * job.zero_mantissa_fraction
    return PeStats(macs_executed=lanes - skipped - gated, zero_group_skips=skipped, mantissa_gates=gated)


def job_energy(job: MatmulJob, stats: PeStats, constants: EnergyConstants = EnergyConstants()) -> float:
    return (stats.macs_executed * constants.active
            + stats.mantissa_gates * constants.gated
            + stats.zero_group_skips * constants.skipped
            + job.m * job.n * constants.register_write)


def jobs_energy(jobs: Sequence, constants: EnergyConstants = EnergyConstants()) -> float:
    """Sum of job_energy over (job, stats) pairs."""
    return sum(job_energy(job, stats, constants) for job, stats in jobs)


# ---------------------------------------------------------------------------
# Register-level reference simulation
# ---------------------------------------------------------------------------

@dataclass
class GridResult:
    output: np.ndarray
    cycles: int
    stats: PeStats


class _Cell:
    """One PE: a stationary operand plus the registers it forwards each cycle."""
    __slots__ = ("stationary", "left", "top", "acc")

    def __init__(self):
        self.stationary = None
        self.left = None   # (index, group) moving right
        self.top = None    # (index, value or group) moving down
        self.acc = 0.0


def _encode_rows(x: np.ndarray, cfg: BfpConfig) -> list:
    """Encode each row of x in groups along the last axis (zero-padded)."""
    width = x.shape[1]
    pad = (-width) % cfg.group_size
    if pad:
        x = np.pad(x, ((0, 0), (0, pad)))
    groups = x.reshape(x.shape[0], -1, cfg.group_size)
    return [[encode_group(g, cfg) for g in row] for row in groups]


def _tick(grid, inject_left, inject_top):
    """Shift operand registers one PE right and down, injecting at the edges."""
    rows, cols = len(grid), len(grid[0])
    for r in range(rows - 1, -1, -1):
        for c in range(cols - 1, -1, -1):
            cell = grid[r][c]
            cell.left = inject_left(r) if c == 0 else grid[r][c - 1].left
            cell.top = inject_top(c) if r == 0 else grid[r - 1][c].top


def _run_weight_stationary(a_groups, b_groups, cfg: ArrayConfig, bfp: BfpConfig, out, stats) -> int:
    m_total, k_total, n_total = len(a_groups), len(b_groups), len(b_groups[0])
    total = 0
    for k0 in range(0, k_total, cfg.rows):
        for n0 in range(0, n_total, cfg.cols):
            grid = [[_Cell() for _ in range(cfg.cols)] for _ in range(cfg.rows)]
            # weights shift down from the top, one row per cycle
            for step in range(cfg.rows):
                for r in range(cfg.rows - 1, 0, -1):
                    for c in range(cfg.cols):
                        grid[r][c].stationary = grid[r - 1][c].stationary
                k = k0 + cfg.rows - 1 - step
                for c in range(cfg.cols):
                    inside = k < k_total and n0 + c < n_total
                    grid[0][c].stationary = b_groups[k][n0 + c] if inside else None
            total += cfg.preload

            t = 0
            collected = 0

            def inject_left(r):
                m = t - r
                if not 0 <= m < m_total:
                    return None
                k = k0 + r
                return (m, a_groups[m][k] if k < k_total else None)

            while collected < m_total * cfg.cols:
                for r in range(cfg.rows - 1, -1, -1):
                    for c in range(cfg.cols - 1, -1, -1):
                        cell = grid[r][c]
                        cell.left = inject_left(r) if c == 0 else grid[r][c - 1].left
                        if cell.left is None:
                            cell.top = None
                            continue
                        m, group = cell.left
                        psum = 0.0 if r == 0 else grid[r - 1][c].top[1]
                        if group is not None and cell.stationary is not None:
                            result = dot_groups(group, cell.stationary, bfp)
                            stats.record(result, bfp.group_size)
                            psum += result.value
                        cell.top = (m, psum)
                for c in range(cfg.cols):
                    token = grid[cfg.rows - 1][c].top
                    if token is not None:
                        collected += 1
                        if n0 + c < n_total:
                            out[token[0], n0 + c] += token[1]
                t += 1
            total += t
    return total


def _run_accum_stationary(a_groups, b_groups, cfg: ArrayConfig, bfp: BfpConfig, out, stats) -> int:
    m_total, k_total, n_total = len(a_groups), len(b_groups), len(b_groups[0])
    total = 0
    for m0 in range(0, m_total, cfg.rows):
        for n0 in range(0, n_total, cfg.cols):
            grid = [[_Cell() for _ in range(cfg.cols)] for _ in range(cfg.rows)]
            t = 0

            def inject_left(r):
                k = t - r
                if not 0 <= k < k_total:
                    return None
                return (k, a_groups[m0 + r][k] if m0 + r < m_total else None)

            def inject_top(c):
                k = t - c
                if not 0 <= k < k_total:
                    return None
                return (k, b_groups[k][n0 + c] if n0 + c < n_total else None)

            while True:
                _tick(grid, inject_left, inject_top)
                live = False
                for row in grid:
                    for cell in row:
                        if cell.left is None or cell.top is None:
                            continue
                        live = True
                        a, b = cell.left[1], cell.top[1]
                        if a is not None and b is not None:
                            result = dot_groups(a, b, bfp)
                            stats.record(result, bfp.group_size)
                            cell.acc += result.value
                if not live and t >= k_total:
                    break
                t += 1
            # accumulators drain out of the left edge, one column per cycle
            for step in range(cfg.cols):
                for r in range(cfg.rows):
                    if m0 + r < m_total and n0 + step < n_total:
                        out[m0 + r, n0 + step] += grid[r][step].acc
            total += t + cfg.drain
    return total


def simulate_grid(a: np.ndarray, b: np.ndarray, cfg: ArrayConfig = ArrayConfig(),
                  dataflow: Optional[Dataflow] = None,
                  bfp: BfpConfig = DEFAULT_CONFIG) -> GridResult:
    """Run A[M, L] . B[L, N] through the PE grid; L is grouped into BFP groups."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape} by {b.shape}")
    a_groups = _encode_rows(a, bfp)
    b_cols = _encode_rows(b.T, bfp)
    b_groups = [[b_cols[n][k] for n in range(len(b_cols))] for k in range(len(b_cols[0]))]
    out = np.zeros((a.shape[0], b.shape[1]))
    stats = PeStats()
    flow = dataflow or cfg.dataflow
    if flow is Dataflow.ACCUM_STATIONARY:
        count = _run_accum_stationary(a_groups, b_groups, cfg, bfp, out, stats)
    else:
        count = _run_weight_stationary(a_groups, b_groups, cfg, bfp, out, stats)
    logger.debug("Simulated %s %dx%dx%d in %d cycles", flow.value, a.shape[0],
                 len(b_groups), b.shape[1], count)
    return GridResult(output=out, cycles=count, stats=stats)
