import threading
import uuid
from dataclasses import dataclass, field
from typing import Dict, List, Optional

from app.api.schemas import ResultRow, ScenarioConfig
from app.core.exceptions import CouplingError
from app.core.logging_config import get_logger
from app.services.bench_runner import run_scenario

logger = get_logger(__name__)


@dataclass
class RunEntry:
    run_id: str
    config: ScenarioConfig
    status: str = "queued"
    rows: List[ResultRow] = field(default_factory=list)
    error: Optional[str] = None


class RunRegistry:
    """In-memory bookkeeping of scenario runs submitted through the API."""

    def __init__(self):
        self._runs: Dict[str, RunEntry] = {}
        self._lock = threading.Lock()

    def submit(self, config: ScenarioConfig) -> RunEntry:
        entry = RunEntry(run_id=uuid.uuid4().hex, config=config)
        with self._lock:
            self._runs[entry.run_id] = entry
        logger.info("Scenario queued", run_id=entry.run_id, scenario=config.scenario.name)
        return entry

    def get(self, run_id: str) -> Optional[RunEntry]:
        with self._lock:
            return self._runs.get(run_id)

    def execute(self, run_id: str) -> None:
        """Runs a queued scenario; failures are stored on the entry, never raised."""
        entry = self.get(run_id)
        if entry is None:
            logger.warning("Unknown run id", run_id=run_id)
            return
        entry.status = "running"
        try:
            entry.rows = run_scenario(entry.config)
            entry.status = "done"
            logger.info("Scenario finished", run_id=run_id, rows=len(entry.rows))
        except CouplingError as e:
            entry.status, entry.error = "failed", str(e)
            logger.error("Scenario failed", run_id=run_id, error=str(e))
        except Exception as e:
            entry.status, entry.error = "failed", f"unexpected error: {e}"
            logger.error("Unexpected error while running scenario", run_id=run_id, error=str(e), exc_info=True)
