"""
Hybrid on-chip memory model: eDRAM and SRAM banks backed by off-chip DRAM.

Transient data (activations, gradients) lives in the transient banks, which
are eDRAM on the CAMEL profile. Static data (weights, pooled backbone
injections, weight gradients) lives in SRAM. eDRAM cells leak, so any datum
held longer than the retention time needs refreshes (a read followed by a
write of the word) or it reads back as noise.

Energies are relative units: an SRAM word access is 1.0.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from app.services.bfp import DEFAULT_CONFIG
from app.services.systolic import ArrayConfig

logger = logging.getLogger(__name__)

KB = 1024


class RetentionRangeError(Exception):
    """Temperature outside the calibrated retention range."""


class AllocationError(Exception):
    """Buffers cannot be placed in the available banks."""


class MemoryKind(str, Enum):
    EDRAM = "EDRAM"
    SRAM = "SRAM"
    DRAM_OFFCHIP = "DRAM_OFFCHIP"


class BankRole(str, Enum):
    TRANSIENT = "transient"
    STATIC = "static"


@dataclass(frozen=True)
class BankConfig:
    name: str
    kind: MemoryKind
    capacity_bytes: int
    role: BankRole = BankRole.TRANSIENT
    word_bits: int = DEFAULT_CONFIG.encoded_size_bits

    def __post_init__(self):
        if self.capacity_bytes <= 0:
            raise ValueError(f"bank {self.name} needs a positive capacity")
        if self.kind is MemoryKind.EDRAM and self.word_bits != DEFAULT_CONFIG.encoded_size_bits:
            raise ValueError(
                f"eDRAM word of {self.word_bits} bits does not hold one "
                f"{DEFAULT_CONFIG.encoded_size_bits}-bit BFP group"
            )

    @property
    def word_bytes(self) -> float:
        return self.word_bits / 8

    def to_dict(self) -> dict:
        row = asdict(self)
        row["kind"] = self.kind.value
        row["role"] = self.role.value
        return row


@dataclass(frozen=True)
class MemoryEnergyConstants:
    """Per-word access energies and per-byte leakage power (per microsecond)."""
    sram_access: float = 1.0
    edram_access: float = 0.7
    dram_access: float = 100.0
    sram_leakage: float = 1e-3
    leakage_ratio: float = 3.5

    def __post_init__(self):
        if min(self.sram_access, self.edram_access, self.dram_access, self.sram_leakage) < 0:
            raise ValueError("memory energies must be non-negative")
        if self.leakage_ratio <= 0:
            raise ValueError("leakage ratio must be positive")

    @property
    def edram_leakage(self) -> float:
        return self.sram_leakage / self.leakage_ratio

    @property
    def refresh_per_word(self) -> float:
        return 2 * self.edram_access

    def access(self, kind: MemoryKind) -> float:
        return {
            MemoryKind.SRAM: self.sram_access,
            MemoryKind.EDRAM: self.edram_access,
            MemoryKind.DRAM_OFFCHIP: self.dram_access,
        }[kind]

    def leakage(self, kind: MemoryKind) -> float:
        if kind is MemoryKind.EDRAM:
            return self.edram_leakage
        if kind is MemoryKind.SRAM:
            return self.sram_leakage
        return 0.0


@dataclass(frozen=True)
class MemoryTiming:
    """Stall costs in array cycles."""
    dram_access_cycles: float = 50.0
    refresh_cycles: float = 2.0


# ---------------------------------------------------------------------------
# Retention and refresh
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetentionModel:
    """Retention time (us) against temperature (C), log-linear between points."""
    points: tuple = ((100.0, 3.35), (-30.0, 30.0))

    def __post_init__(self):
        pts = tuple(sorted((float(t), float(r)) for t, r in self.points))
        if len(pts) < 2:
            raise ValueError("retention model needs at least two calibration points")
        for (t0, r0), (t1, r1) in zip(pts, pts[1:]):
            if t1 == t0 or not r1 < r0:
                raise ValueError("retention must strictly decrease with temperature")
        if pts[-1][1] <= 0:
            raise ValueError("retention times must be positive")
        object.__setattr__(self, "points", pts)

    @property
    def temperature_range(self) -> tuple:
        return self.points[0][0], self.points[-1][0]

    def retention_at(self, temp_c: float) -> float:
        low, high = self.temperature_range
        if not low <= temp_c <= high:
            raise RetentionRangeError(
                f"temperature {temp_c} C outside calibrated range [{low}, {high}]"
            )
        for (t0, r0), (t1, r1) in zip(self.points, self.points[1:]):
            if temp_c == t0:
                return r0
            if temp_c == t1:
                return r1
            if t0 < temp_c < t1:
                w = (temp_c - t0) / (t1 - t0)
                return math.exp((1 - w) * math.log(r0) + w * math.log(r1))
        raise RetentionRangeError(f"no calibration segment covers {temp_c} C")


DEFAULT_RETENTION = RetentionModel()


def retention_at(temp_c: float, model: RetentionModel = DEFAULT_RETENTION) -> float:
    return model.retention_at(temp_c)


def refreshes_required(lifetime_us: float, retention_us: float) -> int:
    """Refreshes that keep a datum alive for lifetime_us: ceil(L / R) - 1."""
    if retention_us <= 0:
        raise ValueError("retention must be positive")
    if lifetime_us < 0:
        raise ValueError("lifetime cannot be negative")
    return max(0, math.ceil(lifetime_us / retention_us) - 1)


@dataclass
class RefreshLedger:
    counts: dict = field(default_factory=dict)
    events: int = 0
    energy: float = 0.0
    expired: list = field(default_factory=list)

    @property
    def max_count(self) -> int:
        return max(self.counts.values(), default=0)

    def to_dict(self) -> dict:
        return {
            "counts": dict(sorted(self.counts.items())),
            "max_count": self.max_count,
            "events": self.events,
            "energy": self.energy,
            "expired": sorted(self.expired),
        }


def build_refresh_ledger(lifetimes: dict, words: dict, retention_us: float,
                         constants: MemoryEnergyConstants = MemoryEnergyConstants(),
                         forced: Optional[int] = None, enabled: bool = True) -> RefreshLedger:
    """
    Refresh accounting for one training step.

    lifetimes   buffer -> data lifetime (us)
    words       buffer -> words resident in refreshable memory
    forced      refresh every resident word this many times instead
    enabled     without refresh, buffers outliving retention are listed as expired
    """
    ledger = RefreshLedger()
    for name in sorted(lifetimes):
        resident = words.get(name, 0)
        if not resident:
            continue
        needed = refreshes_required(lifetimes[name], retention_us)
        if forced is not None:
            count = forced
        elif enabled:
            count = needed
        else:
            count = 0
            if needed:
                ledger.expired.append(name)
        ledger.counts[name] = count
        ledger.events += count * resident
    ledger.energy = ledger.events * constants.refresh_per_word
    if ledger.expired:
        logger.info("Refresh disabled, %d buffers outlive retention", len(ledger.expired))
    return ledger


# ---------------------------------------------------------------------------
# Faults
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FaultModel:
    read_yield: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.read_yield <= 1.0:
            raise ValueError(f"read yield {self.read_yield} outside (0, 1]")


def read_with_faults(values, model: FaultModel, lifetime_us: float, retention_us: float,
                     refreshed: bool = False, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Read a stored tensor back. Expired, unrefreshed data is all noise; otherwise
    each value survives with probability read_yield. Noise is uniform over the
    tensor's own magnitude range.
    """
    values = np.asarray(values, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(model.seed)
    bound = float(np.max(np.abs(values))) if values.size else 0.0
    expired = lifetime_us > retention_us and not refreshed
    if not expired and model.read_yield == 1.0:
        return values.copy()
    noise = rng.uniform(-bound, bound, size=values.shape)
    if expired:
        return noise
    corrupted = rng.random(values.shape) >= model.read_yield
    return np.where(corrupted, noise, values)


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BufferRequest:
    name: str
    size_bytes: float
    role: BankRole = BankRole.TRANSIENT

    def __post_init__(self):
        if self.size_bytes < 0:
            raise ValueError(f"buffer {self.name} has negative size")


@dataclass
class Placement:
    buffer: str
    role: BankRole
    banks: dict = field(default_factory=dict)
    spill_bytes: float = 0.0

    @property
    def size_bytes(self) -> float:
        return sum(self.banks.values()) + self.spill_bytes


@dataclass
class Allocation:
    placements: dict = field(default_factory=dict)
    bank_usage: dict = field(default_factory=dict)

    @property
    def spill_bytes(self) -> float:
        return sum(p.spill_bytes for p in self.placements.values())

    def bytes_in(self, buffer: str, banks: Sequence[BankConfig], kind: MemoryKind) -> float:
        """Bytes of a buffer held in banks of the given kind (spill counts as DRAM)."""
        placement = self.placements.get(buffer)
        if placement is None:
            return 0.0
        if kind is MemoryKind.DRAM_OFFCHIP:
            return placement.spill_bytes
        kinds = {b.name: b.kind for b in banks}
        return sum(size for bank, size in placement.banks.items() if kinds[bank] is kind)

    def to_dict(self) -> dict:
        return {
            "placements": {
                name: {"role": p.role.value, "banks": dict(sorted(p.banks.items())),
                       "spill_bytes": p.spill_bytes}
                for name, p in sorted(self.placements.items())
            },
            "bank_usage": dict(sorted(self.bank_usage.items())),
            "spill_bytes": self.spill_bytes,
        }


def _stripe(request: BufferRequest, banks: list, free: dict) -> Placement:
    placement = Placement(request.name, request.role)
    remaining = request.size_bytes
    for bank in banks:
        if remaining <= 0:
            break
        take = min(remaining, free[bank.name])
        if take > 0:
            placement.banks[bank.name] = take
            free[bank.name] -= take
            remaining -= take
    placement.spill_bytes = max(remaining, 0.0)
    return placement


def allocate(requests: Sequence[BufferRequest], banks: Sequence[BankConfig]) -> Allocation:
    """
    Static buffers go to static banks and must fit. Transient buffers are placed
    largest first, striped first-fit across the transient banks, with any
    remainder spilled to off-chip DRAM.
    """
    allocation = Allocation()
    free = {b.name: float(b.capacity_bytes) for b in banks}
    by_role = {role: [b for b in banks if b.role is role] for role in BankRole}

    static = [r for r in requests if r.role is BankRole.STATIC]
    static_total = sum(r.size_bytes for r in static)
    static_capacity = sum(b.capacity_bytes for b in by_role[BankRole.STATIC])
    if static_total > static_capacity:
        raise AllocationError(
            f"static data of {static_total:.0f} bytes exceeds {static_capacity} bytes of static SRAM"
        )

    ordered = sorted(requests, key=lambda r: (r.role is BankRole.TRANSIENT, -r.size_bytes, r.name))
    for request in ordered:
        if request.name in allocation.placements:
            raise AllocationError(f"buffer {request.name} requested twice")
        allocation.placements[request.name] = _stripe(request, by_role[request.role], free)

    allocation.bank_usage = {b.name: b.capacity_bytes - free[b.name] for b in banks}
    if allocation.spill_bytes:
        logger.info("Spilled %.0f bytes to off-chip DRAM", allocation.spill_bytes)
    return allocation


def resident_words(allocation: Allocation, banks: Sequence[BankConfig],
                   kind: MemoryKind = MemoryKind.EDRAM) -> dict:
    """Words each buffer keeps in banks of one kind."""
    word_bytes = {b.kind: b.word_bytes for b in banks}.get(kind, DEFAULT_CONFIG.encoded_size_bits / 8)
    words = {}
    for name in allocation.placements:
        size = allocation.bytes_in(name, banks, kind)
        if size:
            words[name] = math.ceil(size / word_bytes)
    return words


def utilization(intervals: dict, allocation: Allocation, banks: Sequence[BankConfig],
                total_time: float, kind: MemoryKind = MemoryKind.EDRAM) -> float:
    """
    Time-averaged fraction of one memory kind's capacity holding live data.

    intervals maps a buffer to its (start, end) live intervals.
    """
    capacity = sum(b.capacity_bytes for b in banks if b.kind is kind)
    if capacity == 0 or total_time <= 0:
        return 0.0
    occupied = 0.0
    for name, spans in intervals.items():
        size = allocation.bytes_in(name, banks, kind)
        if size:
            occupied += size * float(sum(end - start for start, end in spans))
    return occupied / (capacity * float(total_time))


# ---------------------------------------------------------------------------
# Energy
# ---------------------------------------------------------------------------

@dataclass
class EnergyReport:
    access: float = 0.0
    refresh: float = 0.0
    leakage: float = 0.0
    pe: float = 0.0

    @property
    def total(self) -> float:
        return self.access + self.refresh + self.leakage + self.pe

    def __add__(self, other: "EnergyReport") -> "EnergyReport":
        return EnergyReport(self.access + other.access, self.refresh + other.refresh,
                            self.leakage + other.leakage, self.pe + other.pe)

    def to_dict(self) -> dict:
        row = asdict(self)
        row["total"] = self.total
        return row


def memory_energy(accesses: dict, allocation: Allocation, ledger: Optional[RefreshLedger],
                  banks: Sequence[BankConfig], total_time_us: float,
                  constants: MemoryEnergyConstants = MemoryEnergyConstants(),
                  pe_energy: float = 0.0) -> EnergyReport:
    """
    accesses maps a buffer to its word accesses. A buffer striped across kinds
    pays each kind's access energy in proportion to the bytes it keeps there.
    """
    report = EnergyReport(pe=pe_energy)
    for name, count in accesses.items():
        placement = allocation.placements.get(name)
        if placement is None or not count:
            continue
        size = placement.size_bytes
        if size <= 0:
            continue
        per_word = sum(
            allocation.bytes_in(name, banks, kind) / size * constants.access(kind)
            for kind in MemoryKind
        )
        report.access += count * per_word
    report.refresh = ledger.energy if ledger is not None else 0.0
    report.leakage = sum(b.capacity_bytes * constants.leakage(b.kind) for b in banks) * total_time_us
    return report


# ---------------------------------------------------------------------------
# Hardware profiles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HardwareProfile:
    name: str
    array: ArrayConfig
    banks: tuple

    def capacity(self, role: Optional[BankRole] = None, kind: Optional[MemoryKind] = None) -> int:
        return sum(b.capacity_bytes for b in self.banks
                   if (role is None or b.role is role) and (kind is None or b.kind is kind))

    @property
    def transient_kind(self) -> MemoryKind:
        kinds = {b.kind for b in self.banks if b.role is BankRole.TRANSIENT}
        return MemoryKind.EDRAM if MemoryKind.EDRAM in kinds else MemoryKind.SRAM

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "array": {"rows": self.array.rows, "cols": self.array.cols,
                      "clock_hz": self.array.clock_hz},
            "banks": [b.to_dict() for b in self.banks],
        }


def _bank_set(prefix: str, count: int, kind: MemoryKind, size: int, role: BankRole) -> list:
    return [BankConfig(f"{prefix}{i}", kind, size, role) for i in range(count)]


def camel_profile(array: Optional[ArrayConfig] = None) -> HardwareProfile:
    """6x6 array, twelve 48KB eDRAM banks for transient data, six 8KB SRAM banks."""
    return HardwareProfile(
        name="CAMEL",
        array=array or ArrayConfig(rows=6, cols=6),
        banks=tuple(
            _bank_set("edram", 12, MemoryKind.EDRAM, 48 * KB, BankRole.TRANSIENT)
            + _bank_set("sram", 6, MemoryKind.SRAM, 8 * KB, BankRole.STATIC)
        ),
    )


def sram_baseline_profile(array: Optional[ArrayConfig] = None) -> HardwareProfile:
    """Same silicon area in SRAM: 4x4 array, six 48KB plus two 24KB SRAM banks."""
    return HardwareProfile(
        name="SRAM",
        array=array or ArrayConfig(rows=4, cols=4),
        banks=tuple(
            _bank_set("act", 6, MemoryKind.SRAM, 48 * KB, BankRole.TRANSIENT)
            + _bank_set("wgt", 2, MemoryKind.SRAM, 24 * KB, BankRole.STATIC)
        ),
    )


def scale_profile(profile: HardwareProfile, size: int) -> HardwareProfile:
    """Resize the array to size x size and scale every bank group by the same area factor."""
    if size < 1:
        raise ValueError("array size must be >= 1")
    area = profile.array.rows * profile.array.cols
    groups = {}
    for bank in profile.banks:
        groups.setdefault((bank.kind, bank.role, bank.capacity_bytes), []).append(bank)
    banks = []
    for (kind, role, capacity), members in groups.items():
        count = math.ceil(len(members) * size * size / area)
        prefix = members[0].name.rstrip("0123456789")
        banks.extend(_bank_set(prefix, count, kind, capacity, role))
    return HardwareProfile(
        name=f"{profile.name}-{size}x{size}",
        array=replace(profile.array, rows=size, cols=size),
        banks=tuple(banks),
    )
