import json
import logging
import math
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from app.services.scheduler import schedule_to_text

logger = logging.getLogger(__name__)


def _plain(value):
    """JSON-safe copy with non-finite floats spelled out."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [_plain(v) for v in items]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, Fraction):
        value = float(value)
    if isinstance(value, float) and not math.isfinite(value):
        if math.isnan(value):
            return "NaN"
        return "Inf" if value > 0 else "-Inf"
    return value


def report_json(report) -> str:
    """Canonical text of a report: sorted keys, fixed indentation."""
    if hasattr(report, "to_dict"):
        report = report.to_dict()
    return json.dumps(_plain(report), sort_keys=True, indent=2) + "\n"


def write_json_report(report, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_json(report), encoding="utf-8")
    logger.info("Wrote report to %s", path)
    return str(path)


def write_table_csv(rows: list, path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame([_plain(r) for r in rows])
    df.to_csv(path, index=False)
    logger.info("Wrote %d rows to %s", len(df), path)
    return str(path)


def write_schedule_text(schedule, path) -> str:
    """schedule is a Schedule or its text form."""
    text = schedule if isinstance(schedule, str) else schedule_to_text(schedule)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Wrote schedule to %s", path)
    return str(path)


def trajectory_rows(trajectory: dict) -> list:
    """Per-epoch rows from a TrainResult.to_dict(); epoch 0 is the untrained model."""
    losses = [None] + list(trajectory["losses"])
    return [
        {"epoch": epoch, "val_accuracy": val, "train_accuracy": tr, "loss": loss}
        for epoch, (val, tr, loss) in enumerate(
            zip(trajectory["val_accuracy"], trajectory["train_accuracy"], losses))
    ]


def report_tables(kind: str, report: dict) -> dict:
    """Tables worth a CSV of their own, keyed by file stem."""
    if kind == "compare":
        return {"comparison": report["rows"]}
    if kind == "sweep":
        return {f"sweep_{report['axis']}": report["rows"]}
    if kind == "train":
        return {"trajectory": trajectory_rows(report["trajectory"])}
    if kind == "lifetime":
        per_buffer = report["measured"]["per_buffer"]
        return {"lifetimes": [
            {"buffer": name, "lifetime_us": value, "refreshes": report["refresh"]["counts"].get(name, 0)}
            for name, value in sorted(per_buffer.items())
        ]}
    return {}


def write_run(kind: str, report, out_dir) -> list:
    """Write report.json plus any tables; returns the written paths."""
    out_dir = Path(out_dir)
    if hasattr(report, "to_dict"):
        report = report.to_dict()
    if kind == "schedule":
        return [write_schedule_text(report, out_dir / "schedule.txt")]
    paths = [write_json_report(report, out_dir / "report.json")]
    for stem, rows in report_tables(kind, report).items():
        paths.append(write_table_csv(rows, out_dir / f"{stem}.csv"))
    return paths
