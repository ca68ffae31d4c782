"""SQLAlchemy models for the results ledger."""

import enum
from datetime import datetime

from sqlalchemy import Column, DateTime, Enum as SQLEnum, Float, Integer, String

from ctxlearn.db.database import Base


class RunKind(str, enum.Enum):
    """What produced a ledger row."""
    PRETRAIN = "pretrain"
    PROBE = "probe"
    ABLATION = "ablation"


class RunRecord(Base):
    """One finished pretraining run, probe or ablation cell."""
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    kind = Column(SQLEnum(RunKind), nullable=False, index=True)
    recipe = Column(String, nullable=True)       # ablation recipe, e.g. "multimask"
    cell = Column(String, nullable=True)         # ablation cell label, e.g. "M=4,bsz=16"
    modality = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)

    num_masks = Column(Integer, nullable=True)
    batch_size = Column(Integer, nullable=True)
    updates = Column(Integer, nullable=True)

    final_eval_loss = Column(Float, nullable=True)
    probe_accuracy = Column(Float, nullable=True)
    checkpoint_path = Column(String, nullable=True)

    created_at = Column(DateTime, default=datetime.utcnow)

    def __repr__(self):
        return f"<RunRecord(id={self.id}, kind={self.kind}, modality={self.modality}, seed={self.seed})>"
