"""
Modeled cost of one training step on a hardware profile.

Combines the schedule trace (compute time and data lifetimes) with bank
allocation, refresh accounting, PE gating energy and memory energy.
"""
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from app.services.bfp import DEFAULT_CONFIG
from app.services.duplex import DuDnnSpec, frozen_params, learnable_params
from app.services.memory import (
    DEFAULT_RETENTION,
    Allocation,
    BankRole,
    BufferRequest,
    EnergyReport,
    HardwareProfile,
    MemoryEnergyConstants,
    MemoryKind,
    MemoryTiming,
    RefreshLedger,
    RetentionModel,
    allocate,
    build_refresh_ledger,
    memory_energy,
    resident_words,
    utilization,
)
from app.services.scheduler import (
    CONV_ROLE,
    FUNCTION_OF,
    LatencyModel,
    LifetimeReport,
    Schedule,
    buffer_live_intervals,
    buffer_sizes,
    layer_dims,
    measure_lifetimes,
    peak_memory,
    simulate_trace,
    tensor_bytes,
)
from app.services.systolic import EnergyConstants, conv_job, estimate_stats, job_energy

logger = logging.getLogger(__name__)

# BFP storage: one 58-bit group holds nine values
BFP_BYTES_PER_ELEMENT = DEFAULT_CONFIG.encoded_size_bits / 8 / DEFAULT_CONFIG.group_size

# A lane MAC costs a twentieth of an SRAM word access
DEFAULT_PE_ENERGY = EnergyConstants(active=0.05, gated=0.0125, skipped=0.0025)


@dataclass(frozen=True)
class CostSettings:
    mode: str = "analytical"
    convention: str = "full"
    temperature_c: float = 100.0
    retention: RetentionModel = DEFAULT_RETENTION
    refresh: bool = True
    forced_refreshes: Optional[int] = None
    zero_group_fraction: float = 0.0
    zero_mantissa_fraction: float = 0.0
    memory_energy: MemoryEnergyConstants = MemoryEnergyConstants()
    pe_energy: EnergyConstants = DEFAULT_PE_ENERGY
    timing: MemoryTiming = MemoryTiming()
    bytes_per_element: float = BFP_BYTES_PER_ELEMENT


@dataclass
class StepCost:
    profile: str
    compute_cycles: Fraction
    stall_cycles: float
    clock_hz: float
    energy: EnergyReport
    ledger: RefreshLedger
    allocation: Allocation
    lifetimes: LifetimeReport
    lifetimes_us: dict = field(default_factory=dict)
    retention_us: float = math.inf
    peak_bytes: float = 0.0
    utilization: float = 0.0

    @property
    def cycles(self) -> float:
        return float(self.compute_cycles) + self.stall_cycles

    @property
    def time_us(self) -> float:
        return self.cycles / self.clock_hz * 1e6

    def residency_lifetimes(self, schedule: Schedule) -> dict:
        """Longest lifetime (us) of stored activations and of other transient data."""
        result = {"stored": 0.0, "transient": 0.0}
        for name, lifetime in self.lifetimes_us.items():
            kind = schedule.buffer_kinds.get(name, ("", 0))[0]
            key = "stored" if kind == "stored" else "transient"
            result[key] = max(result[key], lifetime)
        return result

    def to_dict(self) -> dict:
        return {
            "profile": self.profile,
            "compute_cycles": float(self.compute_cycles),
            "stall_cycles": self.stall_cycles,
            "time_us": self.time_us,
            "energy": self.energy.to_dict(),
            "refresh": self.ledger.to_dict(),
            "spill_bytes": self.allocation.spill_bytes,
            "retention_us": self.retention_us,
            "t_data_us": max(self.lifetimes_us.values(), default=0.0),
            "peak_bytes": self.peak_bytes,
            "utilization": self.utilization,
        }


def retention_for(profile: HardwareProfile, settings: CostSettings) -> float:
    """Retention of the profile's transient memory; SRAM never expires."""
    if profile.transient_kind is not MemoryKind.EDRAM:
        return math.inf
    return settings.retention.retention_at(settings.temperature_c)


def buffer_requests(schedule: Schedule, spec: DuDnnSpec, sizes: dict,
                    bytes_per_element: float) -> list:
    static = schedule.static_buffers
    requests = [
        BufferRequest(name, size, BankRole.STATIC if name in static else BankRole.TRANSIENT)
        for name, size in sorted(buffer_sizes(schedule, sizes).items())
    ]
    weights = sum(p.size for p in learnable_params(spec).values())
    weights += sum(p.size for p in frozen_params(spec).values())
    requests.append(BufferRequest("weights", weights * bytes_per_element, BankRole.STATIC))
    return requests


def _word_accesses(trace, sizes: dict) -> dict:
    word_bytes = DEFAULT_CONFIG.encoded_size_bits / 8
    accesses = {}
    for ev in trace.events:
        accesses[ev.buffer] = accesses.get(ev.buffer, 0) + math.ceil(sizes[ev.label] / word_bytes)
    return accesses


def pe_energy(schedule: Schedule, dims: list, profile: HardwareProfile,
              settings: CostSettings) -> float:
    """Gated PE energy of every convolution pass in the schedule."""
    group = profile.array.group_size
    total = 0.0
    for instr in schedule.instructions:
        if instr.opcode not in FUNCTION_OF:
            continue
        d = dims[instr.layer - 1].conv(FUNCTION_OF[instr.opcode])
        job = conv_job(dims[instr.layer - 1].batch, d.in_channels, d.out_channels, d.height,
                       d.width, d.kernel, CONV_ROLE[instr.opcode], group,
                       settings.zero_group_fraction, settings.zero_mantissa_fraction)
        total += job_energy(job, estimate_stats(job, group), settings.pe_energy)
    return total


def step_cost(schedule: Schedule, spec: DuDnnSpec, batch: int, profile: HardwareProfile,
              settings: CostSettings = CostSettings()) -> StepCost:
    latency = LatencyModel.from_array(profile.array, settings.mode, settings.convention)
    dims = layer_dims(spec, batch)
    trace = simulate_trace(schedule, latency, dims)
    lifetimes = measure_lifetimes(schedule, trace)

    sizes = tensor_bytes(schedule, spec, batch, settings.bytes_per_element)
    allocation = allocate(buffer_requests(schedule, spec, sizes, settings.bytes_per_element),
                          profile.banks)
    transient_us = {
        name: latency.to_us(value) for name, value in lifetimes.per_buffer.items()
        if name not in schedule.static_buffers
    }
    retention = retention_for(profile, settings)
    words = resident_words(allocation, profile.banks, MemoryKind.EDRAM)
    ledger = build_refresh_ledger(transient_us, words, retention, settings.memory_energy,
                                  settings.forced_refreshes, settings.refresh)

    accesses = _word_accesses(trace, sizes)
    compute_us = latency.to_us(trace.total_time)
    energy_pe = pe_energy(schedule, dims, profile, settings)

    spilled = 0.0
    for name, count in accesses.items():
        placement = allocation.placements.get(name)
        if placement is not None and placement.spill_bytes:
            spilled += count * placement.spill_bytes / placement.size_bytes
    edram_banks = sum(1 for b in profile.banks if b.kind is MemoryKind.EDRAM)
    stalls = spilled * settings.timing.dram_access_cycles
    if edram_banks:
        stalls += ledger.events * settings.timing.refresh_cycles / edram_banks

    cost = StepCost(
        profile=profile.name,
        compute_cycles=trace.total_time,
        stall_cycles=stalls,
        clock_hz=profile.array.clock_hz,
        energy=EnergyReport(),
        ledger=ledger,
        allocation=allocation,
        lifetimes=lifetimes,
        lifetimes_us=transient_us,
        retention_us=retention,
        peak_bytes=peak_memory(schedule, sizes),
    )
    cost.energy = memory_energy(accesses, allocation, ledger, profile.banks, cost.time_us,
                                settings.memory_energy, energy_pe)
    cost.utilization = utilization(
        buffer_live_intervals(trace), allocation, profile.banks, trace.total_time,
        profile.transient_kind,
    )
    logger.debug("%s step on %s: %.3f us (compute %.3f), energy %.1f, %d refresh events",
                 schedule.variant.value, profile.name, cost.time_us, compute_us,
                 cost.energy.total, ledger.events)
    return cost
