"""
Experiment orchestration: lifetime analysis, training runs with TTA / ETA,
the variant x hardware comparison and parameter sweeps.

Every entry point takes a validated ExperimentConfig and returns a report
object with a to_dict() suitable for export.write_json_report.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

from app.schemas import ExperimentConfig, HardwareConfig
from app.services.bfp import DEFAULT_CONFIG
from app.services.costing import CostSettings, StepCost, step_cost
from app.services.datasets import Dataset, build_dataset
from app.services.duplex import DuDnnSpec, SpecError, Variant, make_spec
from app.services.memory import (
    BankRole,
    EnergyReport,
    FaultModel,
    HardwareProfile,
    MemoryEnergyConstants,
    MemoryTiming,
    RetentionModel,
    RetentionRangeError,
    camel_profile,
    scale_profile,
    sram_baseline_profile,
)
from app.services.scheduler import (
    LatencyModel,
    closed_form_lifetimes,
    emit_training_schedule,
    layer_dims,
    schedule_to_text,
)
from app.services.systolic import EnergyConstants
from app.services.training import FaultInjector, TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

PROFILES = {"camel": camel_profile, "sram": sram_baseline_profile}


class ConfigError(Exception):
    """The configuration is well-formed but describes an impossible run."""


class ExperimentError(Exception):
    """A run failed; `partial` holds the results gathered before the failure."""

    def __init__(self, message: str, partial: Optional[list] = None):
        super().__init__(message)
        self.partial = partial or []


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def build_profile(hw: HardwareConfig, name: Optional[str] = None) -> HardwareProfile:
    profile = PROFILES[name or hw.profile]()
    if hw.array_size is not None:
        profile = scale_profile(profile, hw.array_size)
    if hw.transient_bank_bytes is not None:
        banks = tuple(
            replace(b, capacity_bytes=hw.transient_bank_bytes) if b.role is BankRole.TRANSIENT else b
            for b in profile.banks
        )
        profile = replace(profile, banks=banks)
    return profile


def cost_settings(hw: HardwareConfig) -> CostSettings:
    try:
        retention = RetentionModel(tuple(hw.retention_points))
        retention.retention_at(hw.temperature_c)
        pe = EnergyConstants(**hw.pe_energy.model_dump())
    except (RetentionRangeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return CostSettings(
        mode=hw.mode,
        convention=hw.convention,
        temperature_c=hw.temperature_c,
        retention=retention,
        refresh=hw.refresh,
        forced_refreshes=hw.forced_refreshes,
        zero_group_fraction=hw.zero_group_fraction,
        zero_mantissa_fraction=hw.zero_mantissa_fraction,
        memory_energy=MemoryEnergyConstants(**hw.memory_energy.model_dump()),
        pe_energy=pe,
        timing=MemoryTiming(hw.dram_access_cycles, hw.refresh_cycles),
    )


def build_model(cfg: ExperimentConfig, variant=None, pool_factor: Optional[int] = None) -> DuDnnSpec:
    m = cfg.model
    try:
        return make_spec(
            in_channels=m.in_channels, image_size=m.image_size, num_blocks=m.num_blocks,
            backbone_channels=m.backbone_channels, branch_channels=m.branch_channels,
            num_classes=m.num_classes, pool_factor=pool_factor or m.pool_factor,
            kernel=m.kernel, branch_norm=m.branch_norm, variant=variant or m.variant,
            seed=cfg.seed,
        )
    except SpecError as e:
        raise ConfigError(str(e)) from e


def build_task(cfg: ExperimentConfig) -> Dataset:
    m = cfg.model
    kwargs = dict(n_samples=m.n_samples, num_classes=m.num_classes, channels=m.in_channels,
                  image_size=m.image_size, seed=cfg.seed)
    if m.dataset == "textures":
        kwargs["pool_factor"] = m.pool_factor
    try:
        return build_dataset(m.dataset, **kwargs)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def train_config(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                       weight_decay=t.weight_decay, seed=cfg.seed,
                       bfp=DEFAULT_CONFIG if cfg.model.bfp else None)


def _with_hardware(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return cfg.model_copy(update={"hardware": cfg.hardware.model_copy(update=changes)})


# ---------------------------------------------------------------------------
# Lifetime analysis
# ---------------------------------------------------------------------------

def run_lifetime(cfg: ExperimentConfig, variant=None) -> dict:
    """Trace-measured and closed-form lifetimes, refresh needs and utilization of one step."""
    spec = build_model(cfg, variant)
    settings = cost_settings(cfg.hardware)
    profile = build_profile(cfg.hardware)
    schedule = emit_training_schedule(spec)
    cost = step_cost(schedule, spec, cfg.train.batch_size, profile, settings)
    latency = LatencyModel.from_array(profile.array, settings.mode, settings.convention)

    report = {
        "variant": spec.variant.value,
        "profile": profile.name,
        "mode": settings.mode,
        "convention": settings.convention,
        "temperature_c": settings.temperature_c,
        "retention_us": cost.retention_us,
        "measured": cost.lifetimes.to_dict(latency.to_us),
        "t_data_us": latency.to_us(cost.lifetimes.t_data),
        "refresh": cost.ledger.to_dict(),
        "utilization": cost.utilization,
        "peak_bytes": cost.peak_bytes,
        "spill_bytes": cost.allocation.spill_bytes,
        "step": cost.to_dict(),
    }
    if spec.variant is Variant.DUDNN:
        dims = layer_dims(spec, cfg.train.batch_size)
        closed = closed_form_lifetimes(dims, latency, "schedule")
        printed = closed_form_lifetimes(dims, latency, "printed")
        report["closed_form"] = {
            "schedule": closed.to_dict(latency.to_us),
            "printed": printed.to_dict(latency.to_us),
        }
        if settings.mode == "analytical":
            report["closed_form_matches"] = (
                closed.components == cost.lifetimes.components
                and closed.t_data == cost.lifetimes.t_data
            )
    logger.info("Lifetime run %s on %s: T_data=%.3f us, retention %.3f us, max refresh %d",
                spec.variant.value, profile.name, report["t_data_us"], cost.retention_us,
                cost.ledger.max_count)
    return report


def run_schedule(cfg: ExperimentConfig) -> str:
    return schedule_to_text(emit_training_schedule(build_model(cfg)))


# ---------------------------------------------------------------------------
# Training, TTA / ETA
# ---------------------------------------------------------------------------

@dataclass
class TtaEtaResult:
    target: float
    tta_s: float = math.inf
    eta: float = math.inf
    steps: Optional[int] = None

    @property
    def reached(self) -> bool:
        return self.steps is not None

    def to_dict(self) -> dict:
        return {"target": self.target, "tta_s": self.tta_s, "eta": self.eta,
                "steps": self.steps, "reached": self.reached}


def tta_eta(result: TrainResult, cost: StepCost, target: float) -> TtaEtaResult:
    """Modeled time and energy until validation accuracy first reaches target."""
    steps = result.steps_to_reach(target)
    if steps is None:
        return TtaEtaResult(target)
    return TtaEtaResult(target, steps * cost.time_us / 1e6, steps * cost.energy.total, steps)


@dataclass
class TrainRun:
    variant: str
    profile: str
    result: TrainResult
    cost: StepCost
    tta: TtaEtaResult
    fault_reads: int = 0
    spec: Optional[DuDnnSpec] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "profile": self.profile,
            "final_accuracy": self.result.final_accuracy,
            "trajectory": self.result.to_dict(),
            "step": self.cost.to_dict(),
            "tta_eta": self.tta.to_dict(),
            "fault_reads": self.fault_reads,
        }


def run_train(cfg: ExperimentConfig, variant=None, profile_name: Optional[str] = None,
              dataset: Optional[Dataset] = None, pool_factor: Optional[int] = None) -> TrainRun:
    spec = build_model(cfg, variant, pool_factor)
    settings = cost_settings(cfg.hardware)
    profile = build_profile(cfg.hardware, profile_name)
    dataset = dataset or build_task(cfg)
    schedule = emit_training_schedule(spec)
    cost = step_cost(schedule, spec, cfg.train.batch_size, profile, settings)

    reader = None
    if cfg.hardware.read_yield < 1.0 or cost.ledger.expired:
        reader = FaultInjector(
            FaultModel(cfg.hardware.read_yield, cfg.seed),
            lifetimes=cost.residency_lifetimes(schedule),
            retention_us=cost.retention_us,
            refreshed=cfg.hardware.refresh,
        )
    result = train(spec, dataset, train_config(cfg), reader)
    run = TrainRun(spec.variant.value, profile.name, result, cost,
                   tta_eta(result, cost, cfg.experiment.target_accuracy),
                   reader.reads if reader else 0, spec)
    logger.info("Trained %s on %s: final val acc %.3f, TTA %s s",
                run.variant, run.profile, result.final_accuracy, run.tta.tta_s)
    return run


# ---------------------------------------------------------------------------
# Comparison
# ---------------------------------------------------------------------------

@dataclass
class ComparisonReport:
    target: float
    rows: list = field(default_factory=list)

    def cell(self, variant: str, profile: str) -> dict:
        return next(r for r in self.rows if r["variant"] == variant and r["profile"] == profile)

    def to_dict(self) -> dict:
        return {"target": self.target, "rows": self.rows}


def _cell_row(run: TrainRun) -> dict:
    return {
        "variant": run.variant,
        "profile": run.profile,
        "final_accuracy": run.result.final_accuracy,
        "reached": run.tta.reached,
        "steps": run.tta.steps,
        "tta_s": run.tta.tta_s,
        "eta": run.tta.eta,
        "step_time_us": run.cost.time_us,
        "step_energy": run.cost.energy.total,
        "refresh_max": run.cost.ledger.max_count,
        "refresh_events": run.cost.ledger.events,
        "utilization": run.cost.utilization,
        "peak_bytes": run.cost.peak_bytes,
        "spill_bytes": run.cost.allocation.spill_bytes,
    }


def normalize(rows: list, metric: str) -> None:
    """Add `<metric>_norm` relative to the smallest finite value."""
    finite = [r[metric] for r in rows if math.isfinite(r[metric])]
    base = min(finite, default=None)
    for r in rows:
        value = r[metric]
        if base is None or not math.isfinite(value):
            r[f"{metric}_norm"] = math.inf
        elif base == 0:
            r[f"{metric}_norm"] = 1.0 if value == 0 else math.inf
        else:
            r[f"{metric}_norm"] = value / base


def run_compare(cfg: ExperimentConfig) -> ComparisonReport:
    dataset = build_task(cfg)
    report = ComparisonReport(cfg.experiment.target_accuracy)
    for variant in cfg.experiment.variants:
        for profile in cfg.experiment.profiles:
            try:
                run = run_train(cfg, variant, profile, dataset)
            except ConfigError:
                raise
            except Exception as e:
                raise ExperimentError(
                    f"cell {Variant(variant).value}/{profile} failed: {e}", partial=report.rows
                ) from e
            report.rows.append(_cell_row(run))
    for metric in ("tta_s", "eta"):
        normalize(report.rows, metric)
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

@dataclass
class SweepReport:
    axis: str
    rows: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"axis": self.axis, "rows": self.rows}


def _temperature_point(cfg: ExperimentConfig, value: float) -> dict:
    report = run_lifetime(_with_hardware(cfg, temperature_c=value))
    return {
        "temperature_c": value,
        "retention_us": report["retention_us"],
        "t_data_us": report["t_data_us"],
        "refresh_max": report["refresh"]["max_count"],
        "refresh_events": report["refresh"]["events"],
    }


def _array_size_point(cfg: ExperimentConfig, value: float) -> dict:
    size = int(value)
    report = run_lifetime(_with_hardware(cfg, array_size=size))
    return {
        "array_size": size,
        "t_data_us": report["t_data_us"],
        "step_time_us": report["step"]["time_us"],
        "refresh_max": report["refresh"]["max_count"],
    }


def _zero_fraction_point(cfg: ExperimentConfig, value: float) -> dict:
    point = _with_hardware(cfg, zero_group_fraction=value)
    spec = build_model(point)
    cost = step_cost(emit_training_schedule(spec), spec, cfg.train.batch_size,
                     build_profile(point.hardware), cost_settings(point.hardware))
    return {"zero_fraction": value, "pe_energy": cost.energy.pe, "step_energy": cost.energy.total}


def _pool_factor_point(cfg: ExperimentConfig, value: float, dataset: Dataset) -> dict:
    factor = int(value)
    run = run_train(cfg, dataset=dataset, pool_factor=factor)
    return {
        "pool_factor": factor,
        "final_accuracy": run.result.final_accuracy,
        "t_data_us": max(run.cost.lifetimes_us.values(), default=0.0),
        "peak_bytes": run.cost.peak_bytes,
    }


def _refresh_points(cfg: ExperimentConfig, values: list, rows: list) -> None:
    """Forced refreshes change cost, not learning: train once, re-cost per point."""
    base = run_train(cfg)
    spec = base.spec
    schedule = emit_training_schedule(spec)
    profile = build_profile(cfg.hardware)
    baseline: Optional[EnergyReport] = None
    for value in values:
        count = int(value)
        settings = cost_settings(_with_hardware(cfg, forced_refreshes=count).hardware)
        cost = step_cost(schedule, spec, cfg.train.batch_size, profile, settings)
        baseline = baseline or cost.energy
        tta = tta_eta(base.result, cost, cfg.experiment.target_accuracy)
        rows.append({
            "refresh_count": count,
            "refresh_events": cost.ledger.events,
            "step_energy": cost.energy.total,
            "eta": tta.eta,
            "eta_ratio": cost.energy.total / baseline.total,
        })


def run_sweep(cfg: ExperimentConfig) -> SweepReport:
    axis = cfg.experiment.sweep_axis
    values = cfg.experiment.sweep_values
    if axis is None or not values:
        raise ConfigError("a sweep needs sweep_axis and sweep_values")
    report = SweepReport(axis)
    try:
        if axis == "refresh_count":
            _refresh_points(cfg, values, report.rows)
            return report
        dataset = build_task(cfg) if axis == "pool_factor" else None
        for value in values:
            if axis == "temperature":
                row = _temperature_point(cfg, value)
            elif axis == "array_size":
                row = _array_size_point(cfg, value)
            elif axis == "zero_fraction":
                row = _zero_fraction_point(cfg, value)
            else:
                row = _pool_factor_point(cfg, value, dataset)
            report.rows.append(row)
            logger.info("Sweep %s=%s done", axis, value)
    except ConfigError:
        raise
    except Exception as e:
        raise ExperimentError(f"sweep over {axis} failed: {e}", partial=report.rows) from e
    if axis == "array_size" and report.rows:
        first = report.rows[0]["t_data_us"]
        for row in report.rows:
            row["t_data_norm"] = row["t_data_us"] / first if first else math.inf
    return report
