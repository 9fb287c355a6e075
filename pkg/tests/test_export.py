import json
import math

import numpy as np
import pandas as pd

from app.services.duplex import Variant, make_spec
from app.services.export import (
    report_json,
    report_tables,
    trajectory_rows,
    write_json_report,
    write_run,
    write_schedule_text,
    write_table_csv,
)
from app.services.scheduler import emit_training_schedule, parse_schedule_text, validate_schedule


class TestJsonReport:
    def test_non_finite_spelled_out(self):
        text = report_json({"tta_s": math.inf, "low": -math.inf, "bad": math.nan})
        assert json.loads(text) == {"bad": "NaN", "low": "-Inf", "tta_s": "Inf"}

    def test_sorted_and_stable(self, tmp_path):
        report = {"b": 1, "a": {"z": np.float64(0.5), "y": np.int64(2)}, "v": Variant.FI}
        a = write_json_report(report, tmp_path / "a.json")
        b = write_json_report(dict(reversed(list(report.items()))), tmp_path / "b.json")
        text = open(a, encoding="utf-8").read()
        assert text == open(b, encoding="utf-8").read()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text)["v"] == "FI"

    def test_creates_directories(self, tmp_path):
        path = write_json_report({}, tmp_path / "nested" / "r.json")
        assert json.loads(open(path).read()) == {}


class TestTables:
    def test_csv(self, tmp_path):
        rows = [{"variant": "DuDNN", "eta": 1.5}, {"variant": "FI", "eta": math.inf}]
        path = write_table_csv(rows, tmp_path / "t.csv")
        assert open(path, encoding="utf-8").read().splitlines() == ["variant,eta", "DuDNN,1.5", "FI,Inf"]
        assert len(pd.read_csv(path)) == 2

    def test_trajectory_rows(self):
        rows = trajectory_rows({"val_accuracy": [0.3, 0.6], "train_accuracy": [0.3, 0.7],
                                "losses": [0.9]})
        assert rows == [
            {"epoch": 0, "val_accuracy": 0.3, "train_accuracy": 0.3, "loss": None},
            {"epoch": 1, "val_accuracy": 0.6, "train_accuracy": 0.7, "loss": 0.9},
        ]

    def test_sweep_table_named_after_axis(self):
        tables = report_tables("sweep", {"axis": "temperature", "rows": [{"temperature_c": 20}]})
        assert list(tables) == ["sweep_temperature"]

    def test_schedule_has_no_tables(self):
        assert report_tables("schedule", {}) == {}


class TestScheduleText:
    def test_written_text_parses(self, tmp_path):
        schedule = emit_training_schedule(make_spec(num_blocks=2))
        path = write_schedule_text(schedule, tmp_path / "s.txt")
        parsed = parse_schedule_text(open(path, encoding="utf-8").read())
        validate_schedule(parsed)
        assert parsed.opcodes() == schedule.opcodes()


class TestWriteRun:
    def test_compare_writes_report_and_table(self, tmp_path):
        report = {"target": 0.9, "rows": [{"variant": "DuDNN", "eta": 1.0, "eta_norm": 1.0}]}
        paths = write_run("compare", report, tmp_path)
        assert [p.rsplit("/", 1)[-1] for p in paths] == ["report.json", "comparison.csv"]

    def test_schedule_writes_text(self, tmp_path):
        paths = write_run("schedule", "variant DuDNN\n", tmp_path)
        assert open(paths[0]).read() == "variant DuDNN\n"
