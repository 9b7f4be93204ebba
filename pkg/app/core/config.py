
from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field

class Settings(BaseSettings):
    # Load .env file located in the project root
    model_config = SettingsConfigDict(env_file='.env', env_file_encoding='utf-8', extra='ignore')

    # Logging Configuration
    log_level: str = Field("INFO", alias='GLC_LOG_LEVEL')
    log_json: bool = Field(False, alias='GLC_LOG_JSON')

    # Output Configuration
    output_dir: str = Field("results", alias='GLC_OUTPUT_DIR')
    mesh_dump: bool = Field(False, alias='GLC_MESH_DUMP') # Debug: write every generated mesh to text
    mesh_dump_dir: str = Field("mesh_dump", alias='GLC_MESH_DUMP_DIR')

    # Linear Algebra Configuration
    oracle_dof_cap: int = Field(60000, alias='GLC_ORACLE_DOF_CAP', gt=0) # Max total DOFs for the reference oracle
    dense_schur_cap: int = Field(3000, alias='GLC_DENSE_SCHUR_CAP', gt=0) # Max interface DOFs for explicit dense S
    interface_tol: float = Field(1e-9, alias='GLC_INTERFACE_TOL', gt=0.0) # Relative to edge length
    singular_pivot_tol: float = Field(1e-12, alias='GLC_SINGULAR_PIVOT_TOL', gt=0.0)

    # Engine Configuration
    default_backend: str = Field("simulated", alias='GLC_DEFAULT_BACKEND')
    mailbox_checksums: bool = Field(False, alias='GLC_MAILBOX_CHECKSUMS')
    thread_poll_s: float = Field(0.05, alias='GLC_THREAD_POLL_S', gt=0.0)
    time_unit_s: float = Field(0.001, alias='GLC_TIME_UNIT_S', ge=0.0) # Seconds per schedule time unit (threaded backend)
    divergence_ratio: float = Field(1e12, alias='GLC_DIVERGENCE_RATIO', gt=1.0)

# Create a single instance for the application to import
settings = Settings()
