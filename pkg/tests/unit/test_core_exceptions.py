import pytest
from app.core.exceptions import (
    AssemblyError,
    CondensationError,
    ConfigError,
    CouplingError,
    DegenerateElementError,
    DirichletConflictError,
    DivergenceError,
    EngineError,
    InterfaceGeometryError,
    MeshError,
    ReportError,
    ShapeMismatchError,
    SingularInteriorError,
    WorkerFailureError,
)

def test_exception_hierarchy():
    """Test that custom exceptions inherit from expected base or Python exceptions."""
    assert issubclass(DegenerateElementError, AssemblyError)
    assert issubclass(DirichletConflictError, AssemblyError)
    assert issubclass(SingularInteriorError, CondensationError)
    assert issubclass(DivergenceError, EngineError)
    assert issubclass(WorkerFailureError, EngineError)
    for exc in (MeshError, AssemblyError, CondensationError, InterfaceGeometryError,
                ShapeMismatchError, EngineError, ConfigError, ReportError):
        assert issubclass(exc, CouplingError)
    assert issubclass(CouplingError, Exception)

def test_shape_mismatch_is_a_value_error():
    with pytest.raises(ValueError, match="wrong length"):
        raise ShapeMismatchError("wrong length")

def test_singular_interior_error_names_subdomain():
    with pytest.raises(SingularInteriorError, match="Subdomain 'fine3'") as info:
        raise SingularInteriorError("fine3", "floating interior")
    assert info.value.subdomain == "fine3"

def test_divergence_error_carries_context():
    record = object()
    with pytest.raises(DivergenceError, match="iteration=7, omega=2.5") as info:
        raise DivergenceError("Residual is not finite", iteration=7, omega=2.5, record=record)
    assert info.value.iteration == 7
    assert info.value.omega == 2.5
    assert info.value.record is record

def test_worker_failure_error_carries_worker_id():
    with pytest.raises(WorkerFailureError, match="Worker 3 failed: boom") as info:
        raise WorkerFailureError(3, "boom")
    assert info.value.worker_id == 3

def test_config_error_carries_key():
    with pytest.raises(ConfigError, match="bad nu") as info:
        raise ConfigError("bad nu", key="nu")
    assert info.value.key == "nu"

def test_interface_geometry_error_carries_pair():
    error = InterfaceGeometryError("nodes disagree", pair=(1, 4))
    assert error.pair == (1, 4)
    assert str(error) == "nodes disagree"
