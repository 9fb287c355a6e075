from app.db.connection import get_connection, transaction, init_db
from app.db.runs import (
    create_run,
    finish_run,
    get_run,
    get_runs,
    get_run_report,
)

__all__ = [
    "get_connection",
    "transaction",
    "init_db",
    "create_run",
    "finish_run",
    "get_run",
    "get_runs",
    "get_run_report",
]
