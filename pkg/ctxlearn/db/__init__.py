"""Results ledger: one row per pretraining run, probe and ablation cell."""

import logging
from typing import List

from ctxlearn.db.database import Base, configure, get_db_context, init_db
from ctxlearn.db.models import RunKind, RunRecord

logger = logging.getLogger(__name__)


def record_run(kind: RunKind, **fields) -> None:
    """Append a ledger row. Failures are logged; they never abort a run."""
    try:
        init_db()
        with get_db_context() as db:
            db.add(RunRecord(kind=kind, **fields))
    except Exception as e:
        logger.warning(f"Could not write to the results ledger: {e}")


def list_runs(limit: int = 50) -> List[dict]:
    init_db()
    with get_db_context() as db:
        rows = db.query(RunRecord).order_by(RunRecord.id.desc()).limit(limit).all()
        return [
            {column.name: getattr(row, column.name) for column in RunRecord.__table__.columns}
            for row in rows
        ]
