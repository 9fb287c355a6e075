import json
import logging
from typing import Optional

from app.db.connection import transaction

logger = logging.getLogger(__name__)


def create_run(kind: str, seed: int, config_json: str, conn=None) -> int:
    """Record a submitted run as pending and return its id."""
    def _execute(c):
        cur = c.execute(
            "INSERT INTO runs (kind, seed, config_json, status) VALUES (?, ?, ?, 'pending')",
            (kind, seed, config_json),
        )
        return cur.lastrowid

    if conn is not None:
        return _execute(conn)
    with transaction() as c:
        return _execute(c)


def finish_run(run_id: int, status: str, report: Optional[str], conn=None):
    """Store the report text (or error) and mark the run done or failed."""
    if status not in ("done", "failed"):
        raise ValueError(f"unknown run status: {status!r}")

    def _execute(c):
        c.execute("UPDATE runs SET status = ?, report_json = ? WHERE run_id = ?",
                  (status, report, run_id))

    if conn is not None:
        _execute(conn)
    else:
        with transaction() as c:
            _execute(c)
    logger.info("Run %d %s", run_id, status)


def get_run(run_id: int) -> Optional[dict]:
    with transaction() as conn:
        row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
        return dict(row) if row else None


def get_runs(kind: Optional[str] = None, limit: int = 100, offset: int = 0) -> list[dict]:
    with transaction() as conn:
        if kind:
            rows = conn.execute(
                "SELECT run_id, kind, seed, status, created_at FROM runs WHERE kind = ? "
                "ORDER BY run_id LIMIT ? OFFSET ?",
                (kind, limit, offset),
            ).fetchall()
        else:
            rows = conn.execute(
                "SELECT run_id, kind, seed, status, created_at FROM runs "
                "ORDER BY run_id LIMIT ? OFFSET ?",
                (limit, offset),
            ).fetchall()
        return [dict(r) for r in rows]


def get_run_report(run_id: int) -> Optional[dict]:
    """Parsed report of a finished run, None while pending or unknown."""
    run = get_run(run_id)
    if run is None or run["report_json"] is None:
        return None
    return json.loads(run["report_json"])
