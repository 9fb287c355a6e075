import math

import pytest
from pydantic import ValidationError

from app.schemas import (
    ExperimentConfig,
    ExperimentSection,
    HardwareConfig,
    ModelConfig,
    TrainSection,
)
from app.services import harness
from app.services.duplex import Variant
from app.services.harness import (
    ConfigError,
    ExperimentError,
    build_model,
    build_profile,
    build_task,
    normalize,
    run_compare,
    run_lifetime,
    run_schedule,
    run_sweep,
    run_train,
    train_config,
)
from app.services.memory import BankRole, FaultModel
from app.services.scheduler import parse_schedule_text, validate_schedule
from app.services.training import FaultInjector, train


def _config(**sections) -> ExperimentConfig:
    base = {
        "model": ModelConfig(num_blocks=2, n_samples=64),
        "train": TrainSection(epochs=2, batch_size=8),
    }
    base.update(sections)
    return ExperimentConfig(**base)


class TestSchema:
    def test_unknown_keys_rejected(self):
        with pytest.raises(ValidationError, match="extra"):
            ExperimentConfig.model_validate({"hardware": {"profile": "camel", "banks": 3}})

    def test_round_trip(self):
        cfg = _config(hardware=HardwareConfig(temperature_c=25.0, forced_refreshes=2))
        assert ExperimentConfig.model_validate_json(cfg.model_dump_json()) == cfg

    def test_sweep_needs_axis(self):
        with pytest.raises(ValidationError, match="sweep needs"):
            ExperimentSection(kind="sweep")

    def test_compare_needs_two_cells(self):
        with pytest.raises(ValidationError, match="at least two cells"):
            ExperimentSection(kind="compare", variants=[Variant.DUDNN], profiles=["camel"])


class TestBuildProfile:
    def test_transient_bank_override(self):
        profile = build_profile(HardwareConfig(transient_bank_bytes=768))
        assert profile.capacity(BankRole.TRANSIENT) == 12 * 768
        assert profile.capacity(BankRole.STATIC) == 6 * 8 * 1024

    def test_array_size_scales_banks(self):
        profile = build_profile(HardwareConfig(array_size=12))
        assert profile.array.rows == 12
        assert profile.capacity(BankRole.TRANSIENT) == 4 * 12 * 48 * 1024


class TestRunLifetime:
    def test_dudnn_report(self):
        report = run_lifetime(ExperimentConfig())
        assert report["variant"] == "DuDNN"
        assert report["profile"] == "CAMEL"
        assert report["closed_form_matches"] is True
        assert report["refresh"]["max_count"] == 0
        assert report["t_data_us"] < report["retention_us"] == pytest.approx(3.35)
        assert set(report["closed_form"]) == {"schedule", "printed"}

    def test_fi_needs_refresh(self):
        report = run_lifetime(ExperimentConfig(), Variant.FI)
        assert report["refresh"]["max_count"] >= 1
        assert "closed_form" not in report

    def test_out_of_range_temperature(self):
        with pytest.raises(ConfigError, match="outside calibrated range"):
            run_lifetime(ExperimentConfig(hardware=HardwareConfig(temperature_c=150.0)))

    def test_bad_retention_points(self):
        hw = HardwareConfig(retention_points=[(100.0, 30.0), (-30.0, 3.35)])
        with pytest.raises(ConfigError, match="strictly decrease"):
            run_lifetime(ExperimentConfig(hardware=hw))

    def test_bad_model(self):
        with pytest.raises(ConfigError, match="kernel must be odd"):
            run_lifetime(ExperimentConfig(model=ModelConfig(kernel=2)))


class TestRunSchedule:
    def test_text_parses_back(self):
        text = run_schedule(_config())
        assert text.startswith("variant DuDNN\n")
        validate_schedule(parse_schedule_text(text))


class TestRunTrain:
    def test_zero_target_costs_nothing(self):
        run = run_train(_config(experiment=ExperimentSection(target_accuracy=0.0)))
        assert run.tta.reached
        assert run.tta.steps == 0
        assert run.tta.tta_s == 0.0
        assert run.tta.eta == 0.0

    def test_unreachable_target(self):
        run = run_train(_config(experiment=ExperimentSection(target_accuracy=1.01)))
        assert not run.tta.reached
        assert run.tta.tta_s == math.inf
        assert run.tta.eta == math.inf

    def test_deterministic(self):
        cfg = _config()
        a, b = run_train(cfg), run_train(cfg)
        assert a.result.val_accuracy == b.result.val_accuracy
        assert a.result.losses == b.result.losses
        assert a.to_dict()["step"] == b.to_dict()["step"]

    def test_tta_counts_modeled_steps(self):
        run = run_train(_config(experiment=ExperimentSection(target_accuracy=0.0)))
        full = run.result.steps * run.cost.time_us / 1e6
        assert full > 0.0

    def test_expired_fi_reads_go_through_faults(self):
        cfg = _config(model=ModelConfig(num_blocks=4, n_samples=64),
                      hardware=HardwareConfig(refresh=False))
        run = run_train(cfg, Variant.FI)
        assert run.cost.ledger.expired
        assert run.fault_reads > 0

    def test_reliable_dudnn_skips_fault_injection(self):
        assert run_train(_config()).fault_reads == 0

    def test_read_yield_enables_faults(self):
        run = run_train(_config(hardware=HardwareConfig(read_yield=0.999)))
        assert run.fault_reads > 0


class TestNormalize:
    def test_minimum_is_one(self):
        rows = [{"eta": 4.0}, {"eta": 2.0}, {"eta": math.inf}]
        normalize(rows, "eta")
        assert [r["eta_norm"] for r in rows] == [2.0, 1.0, math.inf]

    def test_identical_cells(self):
        rows = [{"eta": 3.5}, {"eta": 3.5}]
        normalize(rows, "eta")
        assert [r["eta_norm"] for r in rows] == [1.0, 1.0]

    def test_zero_base(self):
        rows = [{"tta_s": 0.0}, {"tta_s": 1.0}]
        normalize(rows, "tta_s")
        assert [r["tta_s_norm"] for r in rows] == [1.0, math.inf]

    def test_nothing_finite(self):
        rows = [{"eta": math.inf}]
        normalize(rows, "eta")
        assert rows[0]["eta_norm"] == math.inf


class TestRunCompare:
    def _compare_config(self, **hardware):
        return _config(
            model=ModelConfig(num_blocks=4, n_samples=64),
            hardware=HardwareConfig(**hardware),
            train=TrainSection(epochs=1, batch_size=8),
            experiment=ExperimentSection(kind="compare", target_accuracy=0.0,
                                         variants=[Variant.DUDNN, Variant.FI],
                                         profiles=["camel", "sram"]),
        )

    def test_cells_and_refresh(self):
        report = run_compare(self._compare_config())
        assert len(report.rows) == 4
        assert report.cell("DuDNN", "CAMEL")["refresh_max"] == 0
        assert report.cell("FI", "SRAM")["refresh_max"] == 0
        for metric in ("tta_s_norm", "eta_norm"):
            assert 1.0 in [r[metric] for r in report.rows]

    def test_fi_refreshes_where_dudnn_does_not(self):
        report = run_compare(self._compare_config())
        assert report.cell("FI", "CAMEL")["refresh_max"] >= 1
        assert report.cell("FI", "CAMEL")["peak_bytes"] > report.cell("DuDNN", "CAMEL")["peak_bytes"]

    def test_cell_failure_keeps_partial_rows(self, monkeypatch):
        real_train = harness.train
        calls = []

        def flaky(*args, **kwargs):
            calls.append(1)
            if len(calls) == 2:
                raise RuntimeError("boom")
            return real_train(*args, **kwargs)

        monkeypatch.setattr(harness, "train", flaky)
        with pytest.raises(ExperimentError, match="cell DuDNN/sram failed: boom") as info:
            run_compare(self._compare_config())
        assert len(info.value.partial) == 1


class TestRunSweep:
    def _sweep(self, axis, values, **hardware):
        return run_sweep(_config(
            hardware=HardwareConfig(**hardware),
            train=TrainSection(epochs=1, batch_size=8),
            experiment=ExperimentSection(kind="sweep", sweep_axis=axis, sweep_values=values),
        ))

    def test_temperature_refresh_monotone(self):
        cfg = _config(model=ModelConfig(variant=Variant.FI, num_blocks=4, n_samples=64),
                      experiment=ExperimentSection(kind="sweep", sweep_axis="temperature",
                                                   sweep_values=[-30.0, 20.0, 60.0, 100.0]))
        rows = run_sweep(cfg).rows
        counts = [r["refresh_max"] for r in rows]
        assert counts == sorted(counts)
        assert counts[0] == 0 and counts[-1] >= 1
        retention = [r["retention_us"] for r in rows]
        assert retention == sorted(retention, reverse=True)

    def test_array_size_lifetime_shrinks(self):
        rows = self._sweep("array_size", [6, 10, 12]).rows
        norms = [r["t_data_norm"] for r in rows]
        assert norms[0] == 1.0
        assert norms == sorted(norms, reverse=True)
        assert norms[-1] < 1.0

    def test_zero_fraction_lowers_pe_energy(self):
        rows = self._sweep("zero_fraction", [0.0, 0.5, 1.0]).rows
        energies = [r["pe_energy"] for r in rows]
        assert energies[0] > energies[1] > energies[2]

    def test_forced_refresh_raises_eta(self):
        rows = self._sweep("refresh_count", [0, 1, 2]).rows
        assert rows[0]["eta_ratio"] == 1.0
        assert 1.0 < rows[1]["eta_ratio"] < rows[2]["eta_ratio"]

    def test_pool_factor(self):
        rows = self._sweep("pool_factor", [1, 2]).rows
        assert [r["pool_factor"] for r in rows] == [1, 2]
        assert all(0.0 <= r["final_accuracy"] <= 1.0 for r in rows)

    def test_missing_axis(self):
        with pytest.raises(ConfigError, match="sweep needs"):
            run_sweep(_config())

    def test_failure_is_wrapped(self, monkeypatch):
        def broken(*args, **kwargs):
            raise RuntimeError("no array")

        monkeypatch.setattr(harness, "run_lifetime", broken)
        with pytest.raises(ExperimentError, match="sweep over temperature failed") as info:
            self._sweep("temperature", [20.0])
        assert info.value.partial == []


SEEDS = range(5)


def _mean_final_accuracy(cfg: ExperimentConfig, variant) -> float:
    accs = [run_train(cfg.model_copy(update={"seed": seed}), variant).result.final_accuracy
            for seed in SEEDS]
    return sum(accs) / len(accs)


class TestVariantOrdering:
    def test_default_learning_rate_is_stable(self):
        run = run_train(ExperimentConfig(train=TrainSection(epochs=10)))
        assert all(math.isfinite(loss) for loss in run.result.losses)
        assert run.result.final_accuracy >= 0.9

    def test_mean_final_accuracy_order(self):
        cfg = ExperimentConfig(train=TrainSection(epochs=10))
        acc = {v: _mean_final_accuracy(cfg, v) for v in Variant}
        assert acc[Variant.FI] >= acc[Variant.DUDNN] - 0.01
        assert acc[Variant.DUDNN] > acc[Variant.CA] > acc[Variant.BO]


class TestFaultRobustness:
    def test_read_yield_barely_moves_accuracy(self):
        cfg = ExperimentConfig(train=TrainSection(epochs=10))
        faulty = cfg.model_copy(update={"hardware": HardwareConfig(read_yield=0.999)})
        clean_acc = _mean_final_accuracy(cfg, Variant.DUDNN)
        faulty_acc = _mean_final_accuracy(faulty, Variant.DUDNN)
        assert clean_acc - faulty_acc <= 0.01

    def test_expired_unrefreshed_fi_is_near_chance(self):
        cfg = ExperimentConfig(model=ModelConfig(variant=Variant.FI),
                               train=TrainSection(epochs=5))
        chance = 1.0 / cfg.model.num_classes
        accs = []
        for seed in SEEDS:
            point = cfg.model_copy(update={"seed": seed})
            injector = FaultInjector(FaultModel(read_yield=1.0, seed=seed),
                                     lifetimes={"stored": math.inf, "transient": math.inf},
                                     retention_us=3.35, refreshed=False)
            result = train(build_model(point), build_task(point), train_config(point), injector)
            accs.append(result.final_accuracy)
        assert sum(accs) / len(accs) <= 2 * chance


class TestDeskComparison:
    """Small transient banks: FI's stored activations spill off chip, DuDNN's do not."""

    @pytest.fixture(scope="class")
    def report(self):
        return run_compare(ExperimentConfig(
            hardware=HardwareConfig(transient_bank_bytes=768),
            train=TrainSection(epochs=5),
            experiment=ExperimentSection(kind="compare", target_accuracy=0.6),
        ))

    def test_eight_cells(self, report):
        assert len(report.rows) == 8

    def test_only_fi_spills_on_camel(self, report):
        assert report.cell("DuDNN", "CAMEL")["spill_bytes"] == 0
        assert report.cell("FI", "CAMEL")["spill_bytes"] > 0

    def test_dudnn_camel_is_fastest_and_cheapest(self, report):
        best = report.cell("DuDNN", "CAMEL")
        assert best["reached"]
        reached = [r for r in report.rows if r["reached"]]
        assert best["eta"] == min(r["eta"] for r in reached)
        assert best["tta_s"] == min(r["tta_s"] for r in reached)
        assert best["eta_norm"] == 1.0
        assert best["tta_s_norm"] == 1.0
