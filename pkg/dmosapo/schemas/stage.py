from datetime import datetime
from typing import Any, Dict

from pydantic import BaseModel, Field


class StageRecord(BaseModel):
    """
    Completion marker written to ``<output>/<stage>/stage.json``.
    A stage whose record carries the current digest is skipped unless forced.
    """
    stage: str
    digest: str
    completed_at: datetime = Field(default_factory=datetime.utcnow)
    summary: Dict[str, Any] = Field(default_factory=dict)
