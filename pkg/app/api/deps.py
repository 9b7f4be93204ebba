# app/api/deps.py
from functools import lru_cache # For caching service instances

from app.services.run_registry import RunRegistry

# One registry per application lifecycle, shared by the scenario endpoints.

@lru_cache()
def get_run_registry() -> RunRegistry:
    return RunRegistry()
