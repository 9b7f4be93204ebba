from fastapi import APIRouter, BackgroundTasks, Depends, HTTPException

from app.api.deps import get_run_registry
from app.api.schemas import ScenarioConfig, ScenarioRunResponse, ScenarioStatusResponse
from app.core.logging_config import get_logger
from app.services.run_registry import RunRegistry

router = APIRouter()
logger = get_logger(__name__)


@router.post("", response_model=ScenarioRunResponse, status_code=202) # 202 Accepted for background runs
async def submit_scenario(
    config: ScenarioConfig,
    background_tasks: BackgroundTasks,
    registry: RunRegistry = Depends(get_run_registry),
):
    """
    Queues a scenario run. The body mirrors the INI sections of a scenario file.
    Poll GET /api/scenarios/{run_id} for the result rows.
    """
    entry = registry.submit(config)
    background_tasks.add_task(registry.execute, entry.run_id)
    return ScenarioRunResponse(run_id=entry.run_id, status=entry.status, message="Scenario accepted and queued.")


@router.get("/{run_id}", response_model=ScenarioStatusResponse)
async def get_scenario(run_id: str, registry: RunRegistry = Depends(get_run_registry)):
    entry = registry.get(run_id)
    if entry is None:
        logger.warning("Scenario run not found", run_id=run_id)
        raise HTTPException(status_code=404, detail=f"Run '{run_id}' not found.")
    return ScenarioStatusResponse(run_id=entry.run_id, status=entry.status, rows=entry.rows, error=entry.error)
