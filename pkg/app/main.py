from contextlib import asynccontextmanager # For lifespan events in newer FastAPI/Starlette

from fastapi import FastAPI, APIRouter
from fastapi.middleware.cors import CORSMiddleware

from app.api.endpoints import scenarios
from app.core.config import settings
from app.core.logging_config import configure_logging, get_logger
from app.api.deps import get_run_registry


configure_logging(settings.log_level, settings.log_json)
logger = get_logger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # --- Startup ---
    logger.info("Application startup", backend=settings.default_backend, output_dir=settings.output_dir)
    get_run_registry()
    yield
    # --- Shutdown ---
    logger.info("Application shutdown")


app = FastAPI(
    title="Global/Local Coupling Bench API",
    description="Submit non-intrusive global/local coupling scenarios and fetch their convergence results.",
    version="0.1.0",
    lifespan=lifespan,
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

api_router = APIRouter(prefix="/api")
api_router.include_router(scenarios.router, prefix="/scenarios", tags=["Scenarios"])

app.include_router(api_router)


@app.get("/", tags=["Root"])
async def read_root():
    logger.info("Root endpoint accessed")
    return {"message": "Welcome to the Global/Local Coupling Bench API! Visit /docs for API documentation."}
