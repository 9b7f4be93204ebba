import threading
from typing import Iterable, Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from app.core.config import settings
from app.core.exceptions import CondensationError, ShapeMismatchError, SingularInteriorError
from app.core.logging_config import get_logger
from app.services.fem_assembly import SubdomainModel

logger = get_logger(__name__)


class SchurHandle:
    """
    Cached interior factorization of one subdomain exposing the condensed operator
    S = K_bb - K_bi K_ii^-1 K_ib and rhs b = f_b - K_bi K_ii^-1 f_i.

    Immutable after construction apart from the lazily built dense S cache, so
    reaction() and interior_recovery() may be called from several threads.
    """

    def __init__(self, model: SubdomainModel):
        if model.interface.size == 0:
            raise CondensationError(f"Subdomain '{model.name}' has no interface DOFs to condense on.")
        self.model = model
        self.name = model.name
        self.interface = model.interface
        self.interior = model.interior
        self.factorizations = 0 # Exposed for tests: one factorization per handle

        K = model.stiffness.tocsr()
        self._K_bb = K[self.interface][:, self.interface].tocsr()
        self._K_bi = K[self.interface][:, self.interior].tocsr()
        self._K_ib = K[self.interior][:, self.interface].tocsr()
        self._f_b = model.load[self.interface].copy()
        f_i = model.load[self.interior]

        self._lu = self._factorize(K[self.interior][:, self.interior].tocsc())
        self._z_f = self._interior_solve(f_i) # K_ii^-1 f_i
        b = self._f_b - self._K_bi @ self._z_f
        b.setflags(write=False)
        self.rhs = b
        self._dense: Optional[np.ndarray] = None
        self._dense_lock = threading.Lock()
        logger.debug("Condensed subdomain", subdomain=self.name, n_interface=self.n_interface, n_interior=self.interior.size)

    @classmethod
    def from_matrices(cls, K, f, interface: Iterable[int], dirichlet: Iterable[int] = (), name: str = "matrix") -> "SchurHandle":
        """Matrix-level entry point: condenses a raw (K, f, b-set) triple without a mesh."""
        return cls(SubdomainModel.from_matrices(K, f, interface=interface, dirichlet=dirichlet, name=name))

    @property
    def n_interface(self) -> int:
        return self.interface.size

    def _factorize(self, K_ii: sp.csc_matrix):
        if K_ii.shape[0] == 0:
            return None
        try:
            lu = splu(K_ii, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        except RuntimeError as e: # SuperLU reports exactly singular factors this way
            logger.error("Interior factorization failed", subdomain=self.name, error=str(e))
            raise SingularInteriorError(self.name, f"interior block K_ii is singular ({e}); is the interior floating?") from e
        self.factorizations += 1
        pivots = np.abs(lu.U.diagonal())
        if pivots.size and pivots.min() <= settings.singular_pivot_tol * pivots.max():
            logger.error("Interior factorization is numerically singular", subdomain=self.name,
                         min_pivot=float(pivots.min()), max_pivot=float(pivots.max()))
            raise SingularInteriorError(self.name, "interior block K_ii is numerically singular; is the interior floating?")
        return lu

    def _interior_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._lu is None:
            return np.zeros(rhs.shape)
        return self._lu.solve(np.asarray(rhs, dtype=float))

    def _check_trace(self, u_b: np.ndarray) -> np.ndarray:
        u_b = np.asarray(u_b, dtype=float)
        if u_b.shape != (self.n_interface,):
            raise ShapeMismatchError(f"Subdomain '{self.name}': expected trace of length {self.n_interface}, got {u_b.shape}")
        return u_b

    def reaction(self, u_b: np.ndarray) -> np.ndarray:
        """
        Interface reaction lambda = S u_b - b, computed with one interior solve.

        Args:
            u_b: Interface displacement (length n_interface).

        Returns:
            The interface reaction vector.

        Raises:
            ShapeMismatchError: If u_b has the wrong length.
        """
        u_b = self._check_trace(u_b)
        u_i = self._z_f - self._interior_solve(self._K_ib @ u_b)
        return self._K_bb @ u_b + self._K_bi @ u_i - self._f_b

    def interior_recovery(self, u_b: np.ndarray) -> np.ndarray:
        """Full-length displacement: interior solve, the given trace, zeros on Dirichlet DOFs."""
        u_b = self._check_trace(u_b)
        u = np.zeros(self.model.n_dofs)
        u[self.interior] = self._z_f - self._interior_solve(self._K_ib @ u_b)
        u[self.interface] = u_b
        return u

    def apply(self, v_b: np.ndarray) -> np.ndarray:
        """S v_b without the load term (linear part of reaction())."""
        v_b = self._check_trace(v_b)
        return self._K_bb @ v_b - self._K_bi @ self._interior_solve(self._K_ib @ v_b)

    def _schur(self) -> np.ndarray:
        with self._dense_lock:
            if self._dense is None:
                X = self._interior_solve(self._K_ib.toarray()) if self.interior.size else np.zeros((0, self.n_interface))
                S = self._K_bb.toarray() - self._K_bi @ X
                S = 0.5 * (S + S.T)
                S.setflags(write=False)
                self._dense = S
        return self._dense

    def schur_operator(self) -> sp.csr_matrix:
        """S from the cached factorization, for assembling S^G. No size cap."""
        return sp.csr_matrix(self._schur())

    def dense_schur(self) -> np.ndarray:
        """
        Materializes S explicitly (test oracle and small-problem assembly only).

        Raises:
            CondensationError: If the interface exceeds the configured dense cap.
        """
        if self.n_interface > settings.dense_schur_cap:
            raise CondensationError(
                f"Subdomain '{self.name}': {self.n_interface} interface DOFs exceed dense Schur cap {settings.dense_schur_cap}"
            )
        return self._schur()


def condense(model: SubdomainModel) -> SchurHandle:
    """
    Condenses a subdomain on its interface DOFs.

    Raises:
        CondensationError: If the model has no interface DOFs.
        SingularInteriorError: If K_ii cannot be factorized (floating interior).
    """
    return SchurHandle(model)


def reaction(handle: SchurHandle, u_b: np.ndarray) -> np.ndarray:
    return handle.reaction(u_b)


def interior_recovery(handle: SchurHandle, u_b: np.ndarray) -> np.ndarray:
    return handle.interior_recovery(u_b)
