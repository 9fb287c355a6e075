"""
Pseudo-instruction schedules of duplex training and the memory traffic they cause.

A schedule is a serial list of instructions. Every instruction writes one
named value (a label such as ``y2.3``) into a physical buffer and thereby
overwrites whatever label the buffer held. Forward and backward passes reuse a
small set of stream buffers; only the FI variant keeps one buffer per stored
activation and layer.

Label conventions, l = block index:

    z.l, zc.l      backbone block output (after / before ReLU), z.0 is the image
    x1.l, x2.1     branch inputs; x1.(L+1), x2.(L+1) are the final outputs
    y2.l           x2 stream after F1 of block l
    f1.l, f2.l     residual function outputs (f1c / f2c before ReLU)
    u.l            pooled backbone injection (static)
    g1.l, g2.l     loss gradients w.r.t. the outputs of block l
    q1.l, q2.l     weight gradients (static)
    r*             values recovered during the backward pass

Operation latencies come from a LatencyModel: N / R for the analytical mode,
the systolic model's cycle count for the detailed one. ADD, POOL and RELU take
no time. The trace stamps reads at instruction start and writes at the end;
the lifetime of a value is the gap between its write and its last read.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

import networkx as nx

from app.services.conv import avg_pool, project_channels, relu
from app.services.duplex import (
    DuDnnSpec,
    Variant,
    func_input_grad,
    func_weight_grad,
    inject,
    pre_activation,
)
from app.services.systolic import ArrayConfig, conv_job, cycles

logger = logging.getLogger(__name__)


class ScheduleError(Exception):
    """Malformed schedule, impossible ordering, or inconsistent trace."""


class Opcode(str, Enum):
    CONV_G = "CONV_G"
    CONV_F1 = "CONV_F1"
    CONV_F2 = "CONV_F2"
    INVGRAD_U1A = "INVGRAD_U1A"
    INVGRAD_U2A = "INVGRAD_U2A"
    WGRAD_U1W = "WGRAD_U1W"
    WGRAD_U2W = "WGRAD_U2W"
    ADD = "ADD"
    POOL = "POOL"
    RELU = "RELU"
    RECOMPUTE_F1 = "RECOMPUTE_F1"
    RECOMPUTE_F2 = "RECOMPUTE_F2"


FUNCTION_OF = {
    Opcode.CONV_G: "G",
    Opcode.CONV_F1: "F1",
    Opcode.RECOMPUTE_F1: "F1",
    Opcode.INVGRAD_U1A: "F1",
    Opcode.WGRAD_U1W: "F1",
    Opcode.CONV_F2: "F2",
    Opcode.RECOMPUTE_F2: "F2",
    Opcode.INVGRAD_U2A: "F2",
    Opcode.WGRAD_U2W: "F2",
}

CONV_ROLE = {
    Opcode.CONV_G: "forward",
    Opcode.CONV_F1: "forward",
    Opcode.CONV_F2: "forward",
    Opcode.RECOMPUTE_F1: "forward",
    Opcode.RECOMPUTE_F2: "forward",
    Opcode.INVGRAD_U1A: "input_grad",
    Opcode.INVGRAD_U2A: "input_grad",
    Opcode.WGRAD_U1W: "weight_grad",
    Opcode.WGRAD_U2W: "weight_grad",
}


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    inputs: tuple
    output: str
    buffer: str
    layer: int
    overwrite: Optional[str] = None

    @property
    def reads(self) -> list:
        """Input labels without the subtraction marker."""
        return [name.lstrip("-") for name in self.inputs]


@dataclass(frozen=True)
class Preload:
    """A value placed in a buffer before instruction `position` runs."""
    label: str
    buffer: str
    position: int = 0


@dataclass
class Schedule:
    variant: Variant
    num_layers: int
    instructions: list = field(default_factory=list)
    preloads: list = field(default_factory=list)
    buffer_kinds: dict = field(default_factory=dict)
    forward_length: int = 0

    @property
    def static_buffers(self) -> set:
        return {name for name, (kind, _) in self.buffer_kinds.items() if kind == "static"}

    def __len__(self) -> int:
        return len(self.instructions)

    def opcodes(self) -> list:
        return [instr.opcode.value for instr in self.instructions]


class _Builder:
    """Appends instructions while tracking which label each buffer holds."""

    def __init__(self, variant: Variant, num_layers: int):
        self.schedule = Schedule(variant, num_layers)
        self.holder = {}

    def buffer(self, name: str, kind: str, layer: int = 0) -> str:
        self.schedule.buffer_kinds.setdefault(name, (kind, layer))
        return name

    def preload(self, label: str, buffer: str):
        self.schedule.preloads.append(Preload(label, buffer, len(self.schedule.instructions)))
        self.holder[buffer] = label

    def emit(self, opcode: Opcode, inputs, output: str, buffer: str, layer: int) -> str:
        previous = self.holder.get(buffer)
        self.schedule.instructions.append(
            Instruction(Opcode(opcode), tuple(inputs), output, buffer, layer, previous)
        )
        self.holder[buffer] = output
        return output

    def conv_relu(self, opcode: Opcode, source: str, name: str, layer: int,
                  scratch: str, target: Optional[str] = None):
        """conv into scratch, then ReLU into target (in place by default)."""
        self.emit(opcode, [source], f"{name}c.{layer}", scratch, layer)
        return self.emit(Opcode.RELU, [f"{name}c.{layer}"], f"{name}.{layer}", target or scratch, layer)


def _injects(variant: Variant) -> bool:
    return variant in (Variant.DUDNN, Variant.FI)


def _emit_forward(b: _Builder):
    variant, L = b.schedule.variant, b.schedule.num_layers
    injects = _injects(variant)
    stored = variant is Variant.FI

    def zbuf(l):
        return b.buffer(f"z{l % 2}" if injects else "z", "backbone")

    def x1buf(l):
        return b.buffer(f"x1_{l}", "stored", l) if stored else b.buffer("x1", "stream")

    def y2buf(l):
        return b.buffer(f"y2_{l}", "stored", l) if stored else b.buffer("x2", "stream")

    f1, f2 = b.buffer("f1", "scratch"), b.buffer("f2", "scratch")
    x2 = b.buffer("x2", "stream")
    b.preload("z.0", zbuf(0))

    if variant is Variant.CA:
        for l in range(1, L + 1):
            b.conv_relu(Opcode.CONV_G, f"z.{l - 1}", "z", l, zbuf(l))
    stem_source = f"z.{L}" if variant is Variant.CA else "z.0"
    b.emit(Opcode.POOL, [stem_source], "x1.1", x1buf(1), 0)
    b.emit(Opcode.POOL, [stem_source], "x2.1", x2, 0)

    for l in range(1, L + 1):
        if injects:
            b.conv_relu(Opcode.CONV_G, f"z.{l - 1}", "z", l, zbuf(l))
        b.conv_relu(Opcode.CONV_F1, f"x1.{l}", "f1", l, f1,
                    b.buffer(f"f1_{l}", "stored", l) if stored else None)
        previous = "x2.1" if l == 1 else f"y2.{l - 1}"
        if injects and l >= 2:
            b.emit(Opcode.POOL, [f"z.{l - 1}"], f"u.{l - 1}", b.buffer(f"u{l - 1}", "static", l - 1), l - 1)
            inputs = [previous, f"u.{l - 1}", f"f1.{l}"]
        else:
            inputs = [previous, f"f1.{l}"]
        b.emit(Opcode.ADD, inputs, f"y2.{l}", y2buf(l), l)
        b.conv_relu(Opcode.CONV_F2, f"y2.{l}", "f2", l, f2,
                    b.buffer(f"f2_{l}", "stored", l) if stored else None)
        b.emit(Opcode.ADD, [f"x1.{l}", f"f2.{l}"], f"x1.{l + 1}", x1buf(l + 1), l)

    if injects:
        b.emit(Opcode.POOL, [f"z.{L}"], f"u.{L}", b.buffer(f"u{L}", "static", L), L)
        b.emit(Opcode.ADD, [f"y2.{L}", f"u.{L}"], f"x2.{L + 1}", x2, L)


def _emit_backward(b: _Builder):
    variant, L = b.schedule.variant, b.schedule.num_layers
    injects = _injects(variant)
    g1, g2 = b.buffer("g1", "gradient"), b.buffer("g2", "gradient")
    scratch = b.buffer("a", "scratch")
    f1, f2 = b.buffer("f1", "scratch"), b.buffer("f2", "scratch")
    b.preload(f"g1.{L}", g1)
    b.preload(f"g2.{L}", g2)

    for l in range(L, 0, -1):
        q1 = b.buffer(f"q1_{l}", "static", l)
        q2 = b.buffer(f"q2_{l}", "static", l)
        if variant is Variant.FI:
            b.emit(Opcode.INVGRAD_U2A, [f"g1.{l}", f"f2.{l}"], f"a2.{l}", scratch, l)
            b.emit(Opcode.ADD, [f"g2.{l}", f"a2.{l}"], f"g2.{l - 1}", g2, l)
            b.emit(Opcode.WGRAD_U2W, [f"g1.{l}", f"y2.{l}", f"f2.{l}"], f"q2.{l}", q2, l)
            b.emit(Opcode.INVGRAD_U1A, [f"g2.{l - 1}", f"f1.{l}"], f"a1.{l}", scratch, l)
            b.emit(Opcode.ADD, [f"g1.{l}", f"a1.{l}"], f"g1.{l - 1}", g1, l)
            b.emit(Opcode.WGRAD_U1W, [f"g2.{l - 1}", f"x1.{l}", f"f1.{l}"], f"q1.{l}", q1, l)
            continue

        x1 = b.buffer("x1", "stream")
        x2 = b.buffer("x2", "stream")
        y1 = f"x1.{L + 1}" if l == L else f"rx1.{l + 1}"
        if injects:
            source = f"x2.{L + 1}" if l == L else f"rx2.{l + 1}"
            y2 = b.emit(Opcode.ADD, [source, f"-u.{l}"], f"ry2.{l}", x2, l)
        else:
            y2 = f"y2.{L}" if l == L else f"ry2.{l}"

        b.emit(Opcode.RECOMPUTE_F2, [y2], f"rf2c.{l}", f2, l)
        b.emit(Opcode.RELU, [f"rf2c.{l}"], f"rf2.{l}", f2, l)
        b.emit(Opcode.ADD, [y1, f"-rf2.{l}"], f"rx1.{l}", x1, l)
        b.emit(Opcode.INVGRAD_U2A, [f"g1.{l}", f"rf2.{l}"], f"a2.{l}", scratch, l)
        b.emit(Opcode.ADD, [f"g2.{l}", f"a2.{l}"], f"g2.{l - 1}", g2, l)
        b.emit(Opcode.WGRAD_U2W, [f"g1.{l}", y2, f"rf2.{l}"], f"q2.{l}", q2, l)

        b.emit(Opcode.RECOMPUTE_F1, [f"rx1.{l}"], f"rf1c.{l}", f1, l)
        b.emit(Opcode.RELU, [f"rf1c.{l}"], f"rf1.{l}", f1, l)
        x2_in = f"rx2.{l}" if injects or l == 1 else f"ry2.{l - 1}"
        b.emit(Opcode.ADD, [y2, f"-rf1.{l}"], x2_in, x2, l)
        b.emit(Opcode.INVGRAD_U1A, [f"g2.{l - 1}", f"rf1.{l}"], f"a1.{l}", scratch, l)
        b.emit(Opcode.ADD, [f"g1.{l}", f"a1.{l}"], f"g1.{l - 1}", g1, l)
        b.emit(Opcode.WGRAD_U1W, [f"g2.{l - 1}", f"rx1.{l}", f"rf1.{l}"], f"q1.{l}", q1, l)


def dependency_graph(schedule: Schedule) -> nx.DiGraph:
    """Data edges producer -> consumer, plus reader -> overwriter edges."""
    graph = nx.DiGraph()
    graph.add_nodes_from(range(len(schedule.instructions)))
    producer = {}
    readers = {}
    for i, instr in enumerate(schedule.instructions):
        for label in instr.reads:
            if label in producer:
                graph.add_edge(producer[label], i, kind="data", label=label)
            readers.setdefault(label, []).append(i)
        producer[instr.output] = i
    for i, instr in enumerate(schedule.instructions):
        for reader in readers.get(instr.overwrite, []) if instr.overwrite else []:
            if reader != i:
                graph.add_edge(reader, i, kind="overwrite", label=instr.overwrite)
    return graph


def order_schedule(schedule: Schedule) -> Schedule:
    """
    Check the emitted order against the dependency graph.

    The graph is sorted lexicographically by emission index, so a legal
    emission order comes back unchanged.
    """
    graph = dependency_graph(schedule)
    try:
        order = list(nx.lexicographical_topological_sort(graph, key=lambda n: n))
    except nx.NetworkXUnfeasible as e:
        raise ScheduleError("instruction dependencies form a cycle") from e
    if order != list(range(len(order))):
        first = next(i for i, n in enumerate(order) if i != n)
        instr = schedule.instructions[first]
        raise ScheduleError(
            f"instruction {first} ({instr.opcode.value} -> {instr.output}) runs before a dependency"
        )
    return schedule


def emit_training_schedule(spec: DuDnnSpec) -> Schedule:
    """Forward pass followed by the backward pass of one training step."""
    b = _Builder(Variant(spec.variant), spec.num_blocks)
    _emit_forward(b)
    b.schedule.forward_length = len(b.schedule.instructions)
    _emit_backward(b)
    schedule = order_schedule(b.schedule)
    validate_schedule(schedule)
    logger.debug("Emitted %s schedule: %d instructions, %d buffers", schedule.variant.value,
                 len(schedule), len(schedule.buffer_kinds))
    return schedule


def emit_forward_schedule(spec: DuDnnSpec) -> Schedule:
    b = _Builder(Variant(spec.variant), spec.num_blocks)
    _emit_forward(b)
    b.schedule.forward_length = len(b.schedule.instructions)
    schedule = order_schedule(b.schedule)
    validate_schedule(schedule)
    return schedule


def emit_backward_schedule(spec: DuDnnSpec) -> Schedule:
    """The backward pass alone; values it needs from the forward pass are preloaded."""
    full = emit_training_schedule(spec)
    body = full.instructions[full.forward_length:]
    placement = {p.label: p.buffer for p in full.preloads}
    placement.update({instr.output: instr.buffer for instr in full.instructions})
    produced = {instr.output for instr in body}

    b = _Builder(full.variant, full.num_layers)
    for instr in body:
        for label in instr.reads:
            if label not in produced and label not in b.holder.values():
                buffer = placement[label]
                b.buffer(buffer, *full.buffer_kinds[buffer])
                b.preload(label, buffer)
    for instr in body:
        b.buffer(instr.buffer, *full.buffer_kinds[instr.buffer])
        b.emit(instr.opcode, instr.inputs, instr.output, instr.buffer, instr.layer)
    schedule = order_schedule(b.schedule)
    validate_schedule(schedule)
    return schedule


def validate_schedule(schedule: Schedule) -> None:
    """Replay buffer occupancy; raises ScheduleError on the first violation."""
    holder = {}
    location = {}
    written = set()
    preloads = sorted(schedule.preloads, key=lambda p: p.position)

    def store(label: str, buffer: str):
        if buffer not in schedule.buffer_kinds:
            raise ScheduleError(f"buffer {buffer} is not declared")
        if label in written:
            raise ScheduleError(f"label {label} is written twice")
        previous = holder.get(buffer)
        if previous is not None:
            del location[previous]
        holder[buffer] = label
        location[label] = buffer
        written.add(label)

    p = 0
    for i, instr in enumerate(schedule.instructions):
        while p < len(preloads) and preloads[p].position <= i:
            store(preloads[p].label, preloads[p].buffer)
            p += 1
        for label in instr.reads:
            if label not in written:
                raise ScheduleError(f"instruction {i} ({instr.opcode.value}) reads {label} before it is written")
            if label not in location:
                raise ScheduleError(f"instruction {i} ({instr.opcode.value}) reads {label} after it was overwritten")
        if holder.get(instr.buffer) != instr.overwrite:
            raise ScheduleError(
                f"instruction {i} overwrites {holder.get(instr.buffer)!r} in {instr.buffer}, "
                f"declares {instr.overwrite!r}"
            )
        store(instr.output, instr.buffer)
    for preload in preloads[p:]:
        store(preload.label, preload.buffer)


# ---------------------------------------------------------------------------
# Workload and latency
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvDims:
    in_channels: int
    out_channels: int
    height: int
    width: int
    kernel: int

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.height, self.width, self.kernel) < 1:
            raise ValueError(f"conv dimensions must be positive: {self}")


@dataclass(frozen=True)
class LayerDims:
    batch: int
    f1: ConvDims
    f2: ConvDims
    g: Optional[ConvDims] = None

    def conv(self, which: str) -> ConvDims:
        dims = {"G": self.g, "F1": self.f1, "F2": self.f2}.get(which)
        if dims is None:
            raise ScheduleError(f"layer has no {which} operator")
        return dims


def layer_dims(spec: DuDnnSpec, batch: int) -> list:
    _, height, width = spec.image_shape
    size = spec.branch_size
    dims = []
    for l, block in enumerate(spec.branch):
        g = None
        if spec.backbone:
            p = spec.backbone[l]
            g = ConvDims(p.in_channels, p.out_channels, height, width, p.kernel)
        dims.append(LayerDims(
            batch=batch,
            f1=ConvDims(block.f1.in_channels, block.f1.out_channels, size, size, block.f1.kernel),
            f2=ConvDims(block.f2.in_channels, block.f2.out_channels, size, size, block.f2.kernel),
            g=g,
        ))
    return dims


def op_workload(layer: LayerDims, which: str, convention: str = "compact") -> int:
    """
    MAC count N = B * C_in * W * H * k^2 of one operator.

    The "full" convention also multiplies by C_out.
    """
    d = layer.conv(which)
    n = layer.batch * d.in_channels * d.width * d.height * d.kernel ** 2
    if convention == "full":
        return n * d.out_channels
    if convention != "compact":
        raise ValueError(f"unknown MAC convention: {convention!r}")
    return n


@dataclass(frozen=True)
class LatencyModel:
    """Op latency in array cycles (exact fractions in analytical mode)."""
    macs_per_cycle: int = 324
    mode: str = "analytical"
    array: Optional[ArrayConfig] = None
    clock_hz: float = 5e8
    convention: str = "compact"
    fixed_time: Optional[Fraction] = None

    def __post_init__(self):
        if self.macs_per_cycle <= 0:
            raise ValueError("throughput must be positive")
        if self.mode not in ("analytical", "detailed"):
            raise ValueError(f"unknown timing mode: {self.mode!r}")
        if self.mode == "detailed" and self.array is None:
            raise ValueError("detailed timing needs an array configuration")
        if self.convention not in ("compact", "full"):
            raise ValueError(f"unknown MAC convention: {self.convention!r}")

    @classmethod
    def from_array(cls, array: ArrayConfig, mode: str = "analytical",
                   convention: str = "compact") -> "LatencyModel":
        return cls(array.macs_per_cycle, mode, array, array.clock_hz, convention)

    def function_time(self, layer: LayerDims, which: str, role: str = "forward") -> Fraction:
        if self.fixed_time is not None:
            layer.conv(which)
            return Fraction(self.fixed_time)
        if self.mode == "analytical":
            return Fraction(op_workload(layer, which, self.convention), self.macs_per_cycle)
        d = layer.conv(which)
        job = conv_job(layer.batch, d.in_channels, d.out_channels, d.height, d.width, d.kernel,
                       role, self.array.group_size)
        return Fraction(cycles(job, self.array, "detailed"))

    def op_time(self, opcode: Opcode, layer: Optional[LayerDims]) -> Fraction:
        opcode = Opcode(opcode)
        if opcode not in FUNCTION_OF:
            return Fraction(0)
        if layer is None:
            raise ScheduleError(f"{opcode.value} needs layer dimensions")
        return self.function_time(layer, FUNCTION_OF[opcode], CONV_ROLE[opcode])

    def to_us(self, cycles_: Fraction) -> float:
        return float(cycles_) / self.clock_hz * 1e6


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TraceEvent:
    time: Fraction
    kind: str
    buffer: str
    label: str
    index: int


@dataclass
class AccessTrace:
    events: list
    preloads: list = field(default_factory=list)
    total_time: Fraction = Fraction(0)
    static_buffers: frozenset = frozenset()
    forward_length: int = 0


@dataclass
class Version:
    """One label's stay in a buffer."""
    label: str
    buffer: str
    written: Fraction
    write_index: int
    last_read: Optional[Fraction] = None
    last_read_index: Optional[int] = None
    reads: int = 0

    @property
    def lifetime(self) -> Fraction:
        return Fraction(0) if self.last_read is None else self.last_read - self.written


def simulate_trace(schedule: Schedule, latency: LatencyModel, dims: Sequence[LayerDims]) -> AccessTrace:
    """Serial execution: reads at instruction start, the write at its end."""
    if len(dims) != schedule.num_layers:
        raise ScheduleError(f"{len(dims)} layer dims for a {schedule.num_layers}-layer schedule")
    location = {}
    events = []
    starts = []
    t = Fraction(0)
    preloads = sorted(schedule.preloads, key=lambda p: p.position)
    p = 0
    placed = []
    for i, instr in enumerate(schedule.instructions):
        while p < len(preloads) and preloads[p].position <= i:
            location[preloads[p].label] = preloads[p].buffer
            placed.append((preloads[p].label, preloads[p].buffer, t, preloads[p].position))
            p += 1
        starts.append(t)
        for label in instr.reads:
            if label not in location:
                raise ScheduleError(f"instruction {i} reads {label} before it is written")
            events.append(TraceEvent(t, "R", location[label], label, i))
        layer = dims[instr.layer - 1] if instr.layer >= 1 else None
        t += latency.op_time(instr.opcode, layer)
        events.append(TraceEvent(t, "W", instr.buffer, instr.output, i))
        location[instr.output] = instr.buffer
    for preload in preloads[p:]:
        placed.append((preload.label, preload.buffer, t, preload.position))
    return AccessTrace(events=events, preloads=placed, total_time=t,
                       static_buffers=frozenset(schedule.static_buffers),
                       forward_length=schedule.forward_length)


def version_intervals(trace: AccessTrace) -> list:
    current = {}
    versions = []
    preloads = sorted(trace.preloads, key=lambda p: p[3])
    p = 0

    def open_version(label, buffer, time, index):
        version = Version(label, buffer, time, index)
        current[buffer] = version
        versions.append(version)

    for ev in trace.events:
        while p < len(preloads) and preloads[p][3] <= ev.index:
            label, buffer, time, position = preloads[p]
            open_version(label, buffer, time, position)
            p += 1
        if ev.kind == "W":
            open_version(ev.label, ev.buffer, ev.time, ev.index)
            continue
        version = current.get(ev.buffer)
        if version is None or version.label != ev.label:
            raise ScheduleError(f"read of {ev.label} from {ev.buffer} at t={ev.time} before it was written")
        version.last_read = ev.time
        version.last_read_index = ev.index
        version.reads += 1
    for label, buffer, time, position in preloads[p:]:
        open_version(label, buffer, time, position)
    return versions


def measured_lifetimes(trace: AccessTrace) -> dict:
    """Per buffer: the longest write-to-last-read gap of any value it held."""
    lifetimes = {}
    for version in version_intervals(trace):
        lifetimes[version.buffer] = max(lifetimes.get(version.buffer, Fraction(0)), version.lifetime)
    return lifetimes


def measured_components(trace: AccessTrace) -> dict:
    return {v.label: v.lifetime for v in version_intervals(trace)}


def buffer_live_intervals(trace: AccessTrace) -> dict:
    """buffer -> [(write time, last read time)] for values that are read at least once."""
    intervals = {}
    for v in version_intervals(trace):
        if v.last_read is not None and v.last_read > v.written:
            intervals.setdefault(v.buffer, []).append((v.written, v.last_read))
    return intervals


# ---------------------------------------------------------------------------
# Lifetime reports
# ---------------------------------------------------------------------------

FORWARD_COMPONENTS = ("f_y1", "f_y2", "f_y3")
BACKWARD_COMPONENTS = ("b_g1", "b_g2", "b_y1", "b_y2")


@dataclass
class LifetimeReport:
    t_f: Fraction = Fraction(0)
    t_b: Fraction = Fraction(0)
    per_buffer: dict = field(default_factory=dict)
    components: dict = field(default_factory=dict)
    convention: str = "measured"

    @property
    def t_data(self) -> Fraction:
        return max(self.t_f, self.t_b)

    def to_dict(self, to_us=None) -> dict:
        convert = to_us or float
        return {
            "convention": self.convention,
            "t_f": convert(self.t_f),
            "t_b": convert(self.t_b),
            "t_data": convert(self.t_data),
            "per_buffer": {k: convert(v) for k, v in sorted(self.per_buffer.items())},
            "components": {
                name: {str(l): convert(v) for l, v in sorted(values.items())}
                for name, values in sorted(self.components.items())
            },
        }


def component_labels(num_layers: int) -> dict:
    """(component, layer) -> label whose lifetime realizes it in a DuDNN schedule."""
    L = num_layers
    labels = {}
    for l in range(1, L + 1):
        labels[("f_y3", l)] = f"x1.{l}"
        labels[("f_y1", l)] = f"y2.{l}"
        labels[("f_y2", l)] = f"z.{l}"
        labels[("b_g1", l)] = f"g1.{l}"
        labels[("b_g2", l)] = f"g2.{l}"
        labels[("b_y1", l)] = f"x1.{L + 1}" if l == L else f"rx1.{l + 1}"
        labels[("b_y2", l)] = f"ry2.{l}"
    return labels


def measure_lifetimes(schedule: Schedule, trace: AccessTrace) -> LifetimeReport:
    """T_f / T_b from the trace; a value belongs to the pass in which it is last used."""
    report = LifetimeReport(per_buffer=measured_lifetimes(trace))
    versions = version_intervals(trace)
    for v in versions:
        if v.buffer in trace.static_buffers:
            continue
        index = v.last_read_index if v.last_read_index is not None else v.write_index
        if index >= trace.forward_length:
            report.t_b = max(report.t_b, v.lifetime)
        else:
            report.t_f = max(report.t_f, v.lifetime)
    if schedule.variant is Variant.DUDNN and schedule.forward_length < len(schedule):
        by_label = {v.label: v.lifetime for v in versions}
        for (name, l), label in component_labels(schedule.num_layers).items():
            if label in by_label:
                report.components.setdefault(name, {})[l] = by_label[label]
    return report


def closed_form_lifetimes(dims: Sequence[LayerDims], latency: LatencyModel,
                          convention: str = "schedule") -> LifetimeReport:
    """
    Lifetime components from operator latencies alone (DuDNN).

    "printed" evaluates the textbook expressions, where backward operators of
    F cost the same as F. "schedule" gives the lifetimes the emitted serial
    schedule realizes, which also pays for recomputing F1 and reads block
    l + 1 values in block l. Terms that refer to a missing neighbour layer
    drop out.
    """
    L = len(dims)
    G = [latency.function_time(d, "G") for d in dims]
    a = [latency.function_time(d, "F1") for d in dims]
    b = [latency.function_time(d, "F2") for d in dims]

    def at(seq, l):
        return seq[l - 1] if 1 <= l <= L else Fraction(0)

    comps = {name: {} for name in FORWARD_COMPONENTS + BACKWARD_COMPONENTS}
    for l in range(1, L + 1):
        if convention == "schedule":
            nxt = l < L
            comps["f_y3"][l] = at(G, l) + at(a, l) + at(b, l)
            comps["f_y1"][l] = at(b, l) + (at(G, l + 1) + at(a, l + 1) if nxt else 0)
            comps["f_y2"][l] = at(a, l) + at(b, l) + (at(G, l + 1) + at(a, l + 1) if nxt else 0)
            comps["b_g1"][l] = (at(a, l + 1) if nxt else 0) + 3 * at(b, l) + 2 * at(a, l)
            comps["b_g2"][l] = (at(b, l + 1) + 3 * at(a, l + 1) if nxt else 0) + 2 * at(b, l)
            comps["b_y1"][l] = (2 * at(b, l + 1) + 3 * at(a, l + 1) if nxt else 0) + at(b, l)
            comps["b_y2"][l] = 3 * at(b, l) + at(a, l)
        elif convention == "printed":
            comps["f_y3"][l] = at(G, l) + at(a, l) + at(b, l)
            comps["f_y1"][l] = at(a, l) + at(G, l + 1) + at(b, l + 1)
            comps["f_y2"][l] = at(a, l) + at(b, l) + at(G, l + 1) + at(b, l + 1)
            # U2a = U2w = F2 and U1a = U1w = F1
            comps["b_g1"][l] = at(a, l) + 3 * at(b, l - 1) + at(a, l - 1)
            comps["b_g2"][l] = 2 * at(b, l) + at(a, l)
            comps["b_y1"][l] = at(b, l) + 2 * at(a, l) + 2 * at(b, l - 1)
            comps["b_y2"][l] = comps["b_y1"][l]
        else:
            raise ValueError(f"unknown lifetime convention: {convention!r}")

    t_f = max((v for name in FORWARD_COMPONENTS for v in comps[name].values()), default=Fraction(0))
    t_b = max((v for name in BACKWARD_COMPONENTS for v in comps[name].values()), default=Fraction(0))
    return LifetimeReport(t_f=t_f, t_b=t_b, components=comps, convention=convention)


# ---------------------------------------------------------------------------
# Memory footprint
# ---------------------------------------------------------------------------

def tensor_elements(label: str, spec: DuDnnSpec, batch: int) -> int:
    name, _, index = label.partition(".")
    l = int(index)
    _, height, width = spec.image_shape
    if name in ("z", "zc"):
        if l == 0:
            return batch * spec.image_shape[0] * height * width
        return batch * spec.backbone[l - 1].out_channels * height * width
    if name in ("q1", "q2"):
        block = spec.branch[l - 1]
        return int((block.f1 if name == "q1" else block.f2).weight.size)
    return batch * spec.branch_channels * spec.branch_size ** 2


def tensor_bytes(schedule: Schedule, spec: DuDnnSpec, batch: int,
                 bytes_per_element: float = 8.0) -> dict:
    labels = [p.label for p in schedule.preloads] + [i.output for i in schedule.instructions]
    return {label: tensor_elements(label, spec, batch) * bytes_per_element for label in labels}


def buffer_sizes(schedule: Schedule, sizes: dict) -> dict:
    """A buffer is as large as the largest value it ever holds."""
    result = {}
    entries = [(p.label, p.buffer) for p in schedule.preloads]
    entries += [(i.output, i.buffer) for i in schedule.instructions]
    for label, buffer in entries:
        if label not in sizes:
            raise ScheduleError(f"no size for {label}")
        result[buffer] = max(result.get(buffer, 0), sizes[label])
    return result


def peak_memory(schedule: Schedule, sizes: dict, include_static: bool = False) -> float:
    """
    Largest total footprint of simultaneously live buffers.

    A buffer is live from its first write to its last read, counted in
    instruction steps. sizes maps labels to bytes.
    """
    capacity = buffer_sizes(schedule, sizes)
    first, last = {}, {}
    writes = [(p.position, p.label, p.buffer) for p in schedule.preloads]
    writes += [(i, instr.output, instr.buffer) for i, instr in enumerate(schedule.instructions)]
    location = {}
    for step, label, buffer in writes:
        first[buffer] = min(first.get(buffer, step), step)
        last[buffer] = max(last.get(buffer, step), step)
        location[label] = buffer
    for i, instr in enumerate(schedule.instructions):
        for label in instr.reads:
            last[location[label]] = max(last[location[label]], i)

    static = schedule.static_buffers
    steps = max(len(schedule.instructions), 1)
    peak = 0.0
    for step in range(steps):
        live = sum(size for buffer, size in capacity.items()
                   if first[buffer] <= step <= last[buffer]
                   and (include_static or buffer not in static))
        peak = max(peak, live)
    return peak


# ---------------------------------------------------------------------------
# Text form
# ---------------------------------------------------------------------------

def schedule_to_text(schedule: Schedule) -> str:
    """One instruction per line: OPCODE layer inputs -> output @buffer [!overwritten]."""
    lines = [
        f"variant {schedule.variant.value}",
        f"layers {schedule.num_layers}",
        f"forward {schedule.forward_length}",
    ]
    for name, (kind, layer) in schedule.buffer_kinds.items():
        lines.append(f"buffer {name} {kind} {layer}")
    for p in schedule.preloads:
        lines.append(f"preload {p.label} {p.buffer} {p.position}")
    for instr in schedule.instructions:
        line = f"{instr.opcode.value} {instr.layer} {','.join(instr.inputs)} -> {instr.output} @{instr.buffer}"
        if instr.overwrite:
            line += f" !{instr.overwrite}"
        lines.append(line)
    return "\n".join(lines) + "\n"


def parse_schedule_text(text: str) -> Schedule:
    header = {}
    schedule = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] in ("variant", "layers", "forward"):
                header[parts[0]] = parts[1]
                continue
            if schedule is None:
                schedule = Schedule(Variant(header["variant"]), int(header["layers"]),
                                    forward_length=int(header.get("forward", 0)))
            if parts[0] == "buffer":
                schedule.buffer_kinds[parts[1]] = (parts[2], int(parts[3]))
            elif parts[0] == "preload":
                schedule.preloads.append(Preload(parts[1], parts[2], int(parts[3])))
            else:
                if parts[3] != "->" or not parts[5].startswith("@"):
                    raise ValueError("expected 'OPCODE layer inputs -> output @buffer'")
                overwrite = parts[6][1:] if len(parts) > 6 else None
                schedule.instructions.append(Instruction(
                    Opcode(parts[0]), tuple(parts[2].split(",")), parts[4], parts[5][1:],
                    int(parts[1]), overwrite,
                ))
        except (IndexError, KeyError, ValueError) as e:
            raise ScheduleError(f"line {number}: cannot parse {raw!r}: {e}") from e
    if schedule is None:
        if "variant" not in header or "layers" not in header:
            raise ScheduleError("schedule text has no header")
        schedule = Schedule(Variant(header["variant"]), int(header["layers"]),
                            forward_length=int(header.get("forward", 0)))
    return schedule


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

def _stem_half(spec: DuDnnSpec, source, half: int):
    x0 = project_channels(avg_pool(source, spec.stem_pool), spec.stem)
    c = spec.branch_channels
    return x0[:, :c] if half == 1 else x0[:, c:]


def _execute(instr: Instruction, args: list, spec: DuDnnSpec):
    op, l = instr.opcode, instr.layer
    values = [v for _, v in args]
    if op is Opcode.ADD:
        total = -values[0] if args[0][0] else values[0]
        for negative, value in args[1:]:
            total = total - value if negative else total + value
        return total
    if op is Opcode.RELU:
        return relu(values[0])
    if op is Opcode.POOL:
        if instr.output in ("x1.1", "x2.1"):
            return _stem_half(spec, values[0], 1 if instr.output == "x1.1" else 2)
        return inject(spec, values[0], int(instr.output.split(".")[1]))
    if op is Opcode.CONV_G:
        return pre_activation(values[0], spec.backbone[l - 1])
    block = spec.branch[l - 1]
    params = block.f1 if FUNCTION_OF[op] == "F1" else block.f2
    if op in (Opcode.CONV_F1, Opcode.CONV_F2, Opcode.RECOMPUTE_F1, Opcode.RECOMPUTE_F2):
        return pre_activation(values[0], params)
    if op in (Opcode.INVGRAD_U1A, Opcode.INVGRAD_U2A):
        d, out = values
        return func_input_grad(d, out, params)
    d, x, out = values
    return func_weight_grad(d, out, x, params)


def replay_schedule(schedule: Schedule, spec: DuDnnSpec, inputs: dict) -> dict:
    """
    Interpret a schedule on real tensors, honouring buffer overwrites.

    inputs supplies every preloaded label. Returns all computed values by label.
    """
    if any(b.f1.batch_norm or b.f2.batch_norm for b in spec.branch):
        raise ScheduleError("replay does not model batch-normalized residual functions")
    if Variant(spec.variant) is not schedule.variant or spec.num_blocks != schedule.num_layers:
        raise ScheduleError("schedule was emitted for a different model")
    store = {}
    values = {}
    preloads = sorted(schedule.preloads, key=lambda p: p.position)
    p = 0

    def put(label, buffer, value):
        store[buffer] = label
        values[label] = value

    for i, instr in enumerate(schedule.instructions):
        while p < len(preloads) and preloads[p].position <= i:
            if preloads[p].label not in inputs:
                raise ScheduleError(f"no value supplied for preloaded {preloads[p].label}")
            put(preloads[p].label, preloads[p].buffer, inputs[preloads[p].label])
            p += 1
        args = []
        for name in instr.inputs:
            label = name.lstrip("-")
            if label not in values or label not in store.values():
                raise ScheduleError(f"instruction {i} reads {label}, which no buffer holds")
            args.append((name.startswith("-"), values[label]))
        put(instr.output, instr.buffer, _execute(instr, args, spec))
    return values
