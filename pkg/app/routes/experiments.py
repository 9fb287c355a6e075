import json
import logging

from fastapi import APIRouter, HTTPException
from fastapi.concurrency import run_in_threadpool

from app import db
from app.schemas import ExperimentConfig
from app.services import harness
from app.services.export import report_json
from app.services.memory import RetentionRangeError

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/experiments", tags=["experiments"])

RUNNERS = {
    "lifetime": harness.run_lifetime,
    "schedule": harness.run_schedule,
    "train": harness.run_train,
    "compare": harness.run_compare,
    "sweep": harness.run_sweep,
}


def _execute(kind: str, config: ExperimentConfig) -> dict:
    """Run one experiment and keep it in the run store."""
    experiment = config.experiment.model_dump()
    experiment["kind"] = kind
    try:
        config = ExperimentConfig.model_validate({**config.model_dump(), "experiment": experiment})
    except ValueError as e:
        raise HTTPException(status_code=422, detail=str(e))

    run_id = db.create_run(kind, config.seed, config.model_dump_json())
    try:
        report = RUNNERS[kind](config)
    except (harness.ConfigError, RetentionRangeError) as e:
        db.finish_run(run_id, "failed", json.dumps({"error": str(e)}))
        raise HTTPException(status_code=400, detail=str(e))
    except harness.ExperimentError as e:
        db.finish_run(run_id, "failed", report_json({"error": str(e), "partial": e.partial}))
        raise HTTPException(status_code=500, detail=f"run {run_id} failed: {e}")
    except Exception as e:
        logger.exception("Run %d failed", run_id)
        db.finish_run(run_id, "failed", json.dumps({"error": str(e)}))
        raise HTTPException(status_code=500, detail=f"run {run_id} failed: {e}")

    if isinstance(report, str):
        report = {"text": report}
    text = report_json(report)
    db.finish_run(run_id, "done", text)
    return {"run_id": run_id, "kind": kind, "report": json.loads(text)}


@router.post("/validate")
async def validate_config(config: ExperimentConfig):
    """Echo the validated run plan; invalid bodies are rejected with 422."""
    return config.model_dump(mode="json")


@router.post("/lifetime")
async def lifetime(config: ExperimentConfig):
    """Lifetime analysis of one training step: per-buffer lifetimes, refresh counts, utilization."""
    return await run_in_threadpool(_execute, "lifetime", config)


@router.post("/schedule")
async def schedule(config: ExperimentConfig):
    """Instruction schedule of one training step as text."""
    return await run_in_threadpool(_execute, "schedule", config)


@router.post("/train")
async def train(config: ExperimentConfig):
    """Train the configured model and report accuracy trajectory plus TTA / ETA."""
    return await run_in_threadpool(_execute, "train", config)


@router.post("/compare")
async def compare(config: ExperimentConfig):
    """Variant x hardware comparison, normalized to the best cell."""
    return await run_in_threadpool(_execute, "compare", config)


@router.post("/sweep")
async def sweep(config: ExperimentConfig):
    """Sweep one parameter (temperature, array_size, zero_fraction, refresh_count, pool_factor)."""
    return await run_in_threadpool(_execute, "sweep", config)
