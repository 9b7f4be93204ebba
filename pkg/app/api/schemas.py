from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from app.core.config import settings
from app.services.scheduling import DelayMode

Mode = Literal["sync", "aitken", "async", "submodel"]
FaceId = Literal["-x", "+x", "-y", "+y", "-z", "+z"]


def _split(value, sep: str = ","):
    """Accepts INI strings ("1.0, 1.5") as well as already-parsed lists."""
    if isinstance(value, str):
        return [part.strip() for part in value.split(sep) if part.strip()]
    return value


def _split_mapping(value):
    """"0:10, 3:2" -> {0: 10.0, 3: 2.0}"""
    if isinstance(value, str):
        pairs = {}
        for item in _split(value):
            key, sep, number = item.partition(":")
            if not sep:
                raise ValueError(f"expected worker:value pairs, got '{item}'")
            pairs[int(key)] = float(number)
        return pairs
    return value


# --- Scenario configuration (INI sections) ---
class ScenarioSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = Field("beam", min_length=1)
    mode: List[Mode] = Field(default_factory=lambda: ["sync"], min_length=1)
    omega: List[float] = Field(default_factory=lambda: [1.0], min_length=1, description="Relaxation sweep (raw multipliers).")
    tol: float = Field(1e-8, gt=0.0)
    max_iters: int = Field(10000, ge=1)
    workers: List[int] = Field(default_factory=list, description="Worker counts; empty means one worker per patch.")
    seed: int = Field(0, ge=0)
    backend: Literal["simulated", "threaded"] = Field(default_factory=lambda: settings.default_backend)

    @field_validator("mode", "omega", "workers", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split(value)

    @field_validator("omega")
    @classmethod
    def positive_omega(cls, value):
        if any(w <= 0.0 for w in value):
            raise ValueError("every omega must be positive")
        return value

    @field_validator("workers")
    @classmethod
    def positive_workers(cls, value):
        if any(w < 1 for w in value):
            raise ValueError("worker counts must be >= 1")
        return value


class GeometrySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: Tuple[int, int, int] = (2, 2, 2)
    coarse_elems: int = Field(2, ge=1)
    fine_elems: int = Field(4, ge=1)
    edge_length: float = Field(1.0, gt=0.0)
    clamped_face: FaceId = "-z"
    patches: Optional[List[Tuple[int, int, int]]] = Field(None, description="Cubes carrying a fine patch; None means all.")

    @field_validator("grid", mode="before")
    @classmethod
    def split_grid(cls, value):
        return _split(value)

    @field_validator("grid")
    @classmethod
    def grid_dims(cls, value):
        if any(n < 1 for n in value):
            raise ValueError("grid dimensions must be >= 1")
        if value[0] * value[1] * value[2] < 2:
            raise ValueError("grid needs at least two cubes")
        return value

    @field_validator("patches", mode="before")
    @classmethod
    def split_patches(cls, value):
        if isinstance(value, str):
            if value.strip().lower() == "all":
                return None
            return [_split(cube.replace(" ", ",")) for cube in _split(value, ";")]
        return value


class MaterialSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    e_matrix: float = Field(1.0, gt=0.0)
    e_ratio: float = Field(10.0, gt=0.0, description="Matrix over inclusion Young modulus.")
    nu: float = Field(0.3, ge=0.0, lt=0.5)
    radius_fraction: float = Field(0.5, ge=0.0, lt=1.0)
    body_load: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    @field_validator("body_load", mode="before")
    @classmethod
    def split_load(cls, value):
        return _split(value)


class DelaySection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: DelayMode = DelayMode.NONE
    delay: float = Field(0.0, ge=0.0, description="Fixed delay, or mean of the random delays (time units).")
    per_worker: Dict[int, float] = Field(default_factory=dict)
    slowdown: Dict[int, float] = Field(default_factory=dict)
    global_cost: float = Field(1.0, gt=0.0, description="Simulated cost of one global solve (time units).")
    fine_cost: Optional[float] = Field(
        None, gt=0.0,
        description="Cost of one fine solve; None scales global_cost by fine_elems^3 / (n_cubes * coarse_elems^3).",
    )

    @field_validator("per_worker", "slowdown", mode="before")
    @classmethod
    def split_pairs(cls, value):
        return _split_mapping(value)


class OutputSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str = Field(default_factory=lambda: settings.output_dir)
    write: bool = True


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    geometry: GeometrySection = Field(default_factory=GeometrySection)
    material: MaterialSection = Field(default_factory=MaterialSection)
    delays: DelaySection = Field(default_factory=DelaySection)
    output: OutputSection = Field(default_factory=OutputSection)


# --- Results ---
CSV_COLUMNS = ["scenario", "mode", "omega", "it_global", "it_fine_min", "it_fine_max",
               "wall_ms", "rel_residual", "rel_error", "converged"]
HISTORY_COLUMNS = ["iter", "time_ms", "residual_norm", "omega"]


class ResultRow(BaseModel):
    scenario: str
    mode: Mode
    omega: float
    it_global: int = Field(..., ge=0)
    it_fine_min: int = Field(..., ge=0)
    it_fine_max: int = Field(..., ge=0)
    wall_ms: float
    rel_residual: Optional[float] = Field(None, description="Final relative residual; None for the submodel baseline.")
    rel_error: Optional[float] = Field(None, description="Relative 2-norm error vs the reference; None without oracle.")
    converged: bool
    status: str = "converged"
    workers: int = Field(1, ge=1)

    def csv_record(self) -> Dict[str, str]:
        return {
            "scenario": self.scenario,
            "mode": self.mode,
            "omega": f"{self.omega:.17g}",
            "it_global": str(self.it_global),
            "it_fine_min": str(self.it_fine_min),
            "it_fine_max": str(self.it_fine_max),
            "wall_ms": f"{self.wall_ms:.3f}",
            "rel_residual": "" if self.rel_residual is None else f"{self.rel_residual:.6e}",
            "rel_error": "" if self.rel_error is None else f"{self.rel_error:.6e}",
            "converged": "true" if self.converged else "false",
        }


# --- API ---
class ScenarioRunResponse(BaseModel):
    run_id: str
    status: str
    message: str


class ScenarioStatusResponse(BaseModel):
    run_id: str
    status: Literal["queued", "running", "done", "failed"]
    rows: List[ResultRow] = []
    error: Optional[str] = None
