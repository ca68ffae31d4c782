"""Results-ledger connection and session management."""

import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine, make_url
from sqlalchemy.orm import declarative_base, sessionmaker

from ctxlearn.config import settings

logger = logging.getLogger(__name__)

# Session factory; bound to an engine by configure()
SessionLocal = sessionmaker(
    autocommit=False,
    autoflush=False,
)

# Base class for models
Base = declarative_base()

_engine: Optional[Engine] = None


def configure(url: Optional[str] = None) -> Engine:
    """
    (Re)bind the ledger to ``url``, defaulting to ``settings.database_url``.

    SQLite parent directories are created on the way.
    """
    global _engine
    url = url or settings.database_url
    parsed = make_url(url)
    connect_args = {}
    if parsed.get_backend_name() == "sqlite":
        connect_args["check_same_thread"] = False
        if parsed.database and parsed.database != ":memory:":
            Path(parsed.database).parent.mkdir(parents=True, exist_ok=True)
    if _engine is not None:
        _engine.dispose()
    _engine = create_engine(url, pool_pre_ping=True, connect_args=connect_args)
    SessionLocal.configure(bind=_engine)
    return _engine


def get_engine() -> Engine:
    return _engine if _engine is not None else configure()


@contextmanager
def get_db_context():
    """
    Context manager for ledger sessions.

    Usage:
        with get_db_context() as db:
            runs = db.query(RunRecord).all()
    """
    get_engine()
    db = SessionLocal()
    try:
        yield db
        db.commit()
    except Exception:
        db.rollback()
        raise
    finally:
        db.close()


def init_db():
    """Initialize ledger tables."""
    from ctxlearn.db import models  # Import models to register them
    Base.metadata.create_all(bind=get_engine())
    logger.debug("Ledger tables ready")

