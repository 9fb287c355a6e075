import os
from typing import Optional

from fastapi import APIRouter, HTTPException
from fastapi.responses import FileResponse

from app import db
from app.config import settings
from app.services.export import report_tables, write_table_csv

router = APIRouter(prefix="/runs", tags=["runs"])


@router.get("/")
async def list_runs(kind: Optional[str] = None, limit: int = 100, offset: int = 0):
    """List stored runs, newest last."""
    runs = db.get_runs(kind, limit=limit, offset=offset)
    return {"showing": len(runs), "runs": runs}


@router.get("/{run_id}")
async def get_run(run_id: int):
    run = db.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    return {
        "run_id": run["run_id"],
        "kind": run["kind"],
        "seed": run["seed"],
        "status": run["status"],
        "created_at": run["created_at"],
        "report": db.get_run_report(run_id),
    }


@router.get("/{run_id}/csv")
async def export_run_csv(run_id: int):
    """Download the run's main table as CSV."""
    run = db.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail="Run not found")
    report = db.get_run_report(run_id)
    tables = report_tables(run["kind"], report) if run["status"] == "done" else {}
    if not tables:
        raise HTTPException(status_code=404, detail="Run has no table")
    stem, rows = next(iter(tables.items()))
    filename = f"run{run_id}_{stem}.csv"
    path = write_table_csv(rows, os.path.join(settings.output_dir, filename))
    return FileResponse(path, media_type="text/csv", filename=filename)
