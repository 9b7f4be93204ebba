class CouplingError(Exception):
    """Base exception for global/local coupling errors."""
    pass

class MeshError(CouplingError):
    """Exception raised for invalid mesh requests."""
    pass

class AssemblyError(CouplingError):
    """Exception raised for errors during finite element assembly."""
    pass

class DegenerateElementError(AssemblyError):
    """Exception raised when an element has a non-positive Jacobian determinant."""
    pass

class DirichletConflictError(AssemblyError):
    """Exception raised when clamped DOFs overlap the coupling interface."""
    pass

class CondensationError(CouplingError):
    """Exception raised for errors during static condensation."""
    pass

class SingularInteriorError(CondensationError):
    """Exception raised when the interior block of a subdomain cannot be factorized."""

    def __init__(self, subdomain: str, message: str):
        super().__init__(f"Subdomain '{subdomain}': {message}")
        self.subdomain = subdomain

class InterfaceGeometryError(CouplingError):
    """Exception raised for inconsistent interface geometry."""

    def __init__(self, message: str, pair=None):
        super().__init__(message)
        self.pair = pair

class ShapeMismatchError(CouplingError, ValueError):
    """Exception raised when a vector does not match the expected size."""
    pass

class EngineError(CouplingError):
    """Base exception for iteration engine errors."""
    pass

class DivergenceError(EngineError):
    """Exception raised when an iteration produces a non-finite or exploding residual."""

    def __init__(self, message: str, iteration: int, omega: float, record=None):
        super().__init__(f"{message} (iteration={iteration}, omega={omega:g})")
        self.iteration = iteration
        self.omega = omega
        self.record = record

class WorkerFailureError(EngineError):
    """Exception raised when an asynchronous worker fails."""

    def __init__(self, worker_id: int, message: str):
        super().__init__(f"Worker {worker_id} failed: {message}")
        self.worker_id = worker_id

class ConfigError(CouplingError):
    """Exception raised for invalid scenario configuration."""

    def __init__(self, message: str, key: str = None):
        super().__init__(message)
        self.key = key

class ReportError(CouplingError):
    """Exception raised when results cannot be written."""
    pass
