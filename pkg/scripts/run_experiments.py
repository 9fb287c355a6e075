"""Run the desk-scale experiment set and print the tables."""
import pandas as pd

from app.config import settings
from app.schemas import ExperimentConfig, ExperimentSection, HardwareConfig, TrainSection
from app.services.duplex import Variant
from app.services.export import write_run
from app.services.harness import run_compare, run_lifetime, run_sweep

pd.set_option("display.width", 160)
pd.set_option("display.max_columns", 20)

base = ExperimentConfig()

print("=== Lifetimes at 100 C (CAMEL) ===")
rows = []
for variant in Variant:
    report = run_lifetime(base, variant)
    rows.append({"variant": report["variant"], "t_data_us": report["t_data_us"],
                 "retention_us": report["retention_us"],
                 "refresh_max": report["refresh"]["max_count"],
                 "peak_bytes": report["peak_bytes"]})
print(pd.DataFrame(rows).to_string(index=False))
print()

print("=== Comparison: variants x hardware ===")
compare = run_compare(base.model_copy(update={
    "hardware": HardwareConfig(transient_bank_bytes=768),
    "train": TrainSection(epochs=5),
    "experiment": ExperimentSection(kind="compare", target_accuracy=0.6),
}))
print(pd.DataFrame(compare.rows)[
    ["variant", "profile", "final_accuracy", "tta_s_norm", "eta_norm", "refresh_max", "spill_bytes"]
].to_string(index=False))
write_run("compare", compare, f"{settings.output_dir}/compare")
print()

sweeps = {
    "temperature": [-30, 0, 25, 60, 85, 100],
    "array_size": [6, 10, 12],
    "zero_fraction": [i / 10 for i in range(11)],
    "refresh_count": [0, 1, 2, 4],
}
for axis, values in sweeps.items():
    print(f"=== Sweep: {axis} ===")
    model = base.model
    if axis == "temperature":
        model = model.model_copy(update={"variant": Variant.FI})
    report = run_sweep(base.model_copy(update={
        "model": model,
        "experiment": ExperimentSection(kind="sweep", sweep_axis=axis, sweep_values=values),
    }))
    print(pd.DataFrame(report.rows).to_string(index=False))
    write_run("sweep", report, f"{settings.output_dir}/sweep_{axis}")
    print()

print("DONE - tables written under", settings.output_dir)
