from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from app.core.exceptions import AssemblyError, DegenerateElementError, DirichletConflictError, ShapeMismatchError
from app.core.logging_config import get_logger
from app.services.mesh_gen import HEX_CORNERS, MaterialField, StructuredMesh

logger = get_logger(__name__)

# 2x2x2 Gauss rule on the reference cube [-1, 1]^3, unit weights
_G = 1.0 / np.sqrt(3.0)
GAUSS_POINTS = np.array([[x, y, z] for z in (-_G, _G) for y in (-_G, _G) for x in (-_G, _G)])
_SIGNS = 2.0 * HEX_CORNERS - 1.0 # (8, 3) corner signs in natural coordinates


def shape_functions(xi: np.ndarray) -> np.ndarray:
    """Trilinear shape function values at one natural point, shape (8,)."""
    return 0.125 * np.prod(1.0 + _SIGNS * xi[None, :], axis=1)


def shape_derivatives(xi: np.ndarray) -> np.ndarray:
    """Natural derivatives dN_a/dxi_k at one point, shape (8, 3)."""
    factors = 1.0 + _SIGNS * xi[None, :]
    d = np.empty((8, 3))
    d[:, 0] = 0.125 * _SIGNS[:, 0] * factors[:, 1] * factors[:, 2]
    d[:, 1] = 0.125 * _SIGNS[:, 1] * factors[:, 0] * factors[:, 2]
    d[:, 2] = 0.125 * _SIGNS[:, 2] * factors[:, 0] * factors[:, 1]
    return d


def elasticity_matrix(young: np.ndarray, poisson: np.ndarray) -> np.ndarray:
    """Isotropic Hooke matrices in Voigt order (xx, yy, zz, yz, xz, xy), shape (n, 6, 6)."""
    young = np.atleast_1d(np.asarray(young, dtype=float))
    poisson = np.atleast_1d(np.asarray(poisson, dtype=float))
    lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    mu = young / (2.0 * (1.0 + poisson))
    D = np.zeros((young.shape[0], 6, 6))
    D[:, :3, :3] = lam[:, None, None]
    D[:, [0, 1, 2], [0, 1, 2]] += 2.0 * mu[:, None]
    D[:, [3, 4, 5], [3, 4, 5]] = mu[:, None]
    return D


def _strain_displacement(grads: np.ndarray) -> np.ndarray:
    """B matrices from physical gradients (n, 3, 8) -> (n, 6, 24)."""
    n = grads.shape[0]
    B = np.zeros((n, 6, 24))
    gx, gy, gz = grads[:, 0, :], grads[:, 1, :], grads[:, 2, :]
    B[:, 0, 0::3] = gx
    B[:, 1, 1::3] = gy
    B[:, 2, 2::3] = gz
    B[:, 3, 1::3] = gz
    B[:, 3, 2::3] = gy
    B[:, 4, 0::3] = gz
    B[:, 4, 2::3] = gx
    B[:, 5, 0::3] = gy
    B[:, 5, 1::3] = gx
    return B


def batch_element_matrices(element_coords: np.ndarray, young: np.ndarray, poisson: np.ndarray, body_load: Optional[Sequence[float]] = None):
    """
    Computes stiffness matrices and consistent body loads for many hexahedra at once.

    Args:
        element_coords: Node coordinates per element, shape (n, 8, 3).
        young: Young moduli, shape (n,).
        poisson: Poisson ratios, shape (n,).
        body_load: Force density vector, or None for no load.

    Returns:
        (stiffness (n, 24, 24), load (n, 24), volume (n,))

    Raises:
        DegenerateElementError: If any Gauss point has a non-positive Jacobian determinant.
    """
    element_coords = np.asarray(element_coords, dtype=float)
    n = element_coords.shape[0]
    D = elasticity_matrix(young, poisson)
    load_vec = np.zeros(3) if body_load is None else np.asarray(body_load, dtype=float)
    K = np.zeros((n, 24, 24))
    f = np.zeros((n, 24))
    volume = np.zeros(n)
    for xi in GAUSS_POINTS:
        dN = shape_derivatives(xi) # (8, 3)
        J = np.einsum("ak,naj->nkj", dN, element_coords) # J[k, j] = sum_a dN_a/dxi_k x_aj
        det = np.linalg.det(J)
        if np.any(det <= 0.0):
            bad = int(np.flatnonzero(det <= 0.0)[0])
            raise DegenerateElementError(f"Element {bad} has non-positive Jacobian determinant {det[bad]:.3e}")
        grads = np.linalg.solve(J, np.broadcast_to(dN.T, (n, 3, 8))) # (n, 3, 8)
        B = _strain_displacement(grads)
        K += np.einsum("nki,nkl,nlj->nij", B, D, B) * det[:, None, None]
        N = shape_functions(xi)
        f += (N[None, :, None] * load_vec[None, None, :]).reshape(1, 24) * det[:, None]
        volume += det
    # Symmetrize away summation-order noise
    K = 0.5 * (K + np.transpose(K, (0, 2, 1)))
    return K, f, volume


def element_stiffness(node_coords: np.ndarray, E: float, nu: float) -> np.ndarray:
    """
    24x24 stiffness of one trilinear hexahedron (isotropic Hooke law, 2x2x2 Gauss).

    Raises:
        AssemblyError: If the material is out of range.
        DegenerateElementError: If the element is inverted or degenerate.
    """
    node_coords = np.asarray(node_coords, dtype=float)
    if node_coords.shape != (8, 3):
        raise ShapeMismatchError(f"Expected 8x3 node coordinates, got {node_coords.shape}")
    if not E > 0.0 or not 0.0 <= nu < 0.5:
        raise AssemblyError(f"Invalid material E={E}, nu={nu}")
    K, _, _ = batch_element_matrices(node_coords[None], np.array([E]), np.array([nu]))
    return K[0]


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SubdomainModel:
    """
    One subdomain: full-length stiffness and load, with an interface (trace) DOF list
    and a Dirichlet set. Interior DOFs are the complement of both.
    """
    name: str
    stiffness: sp.csr_matrix
    load: np.ndarray
    interface: np.ndarray
    dirichlet: np.ndarray
    mesh: Optional[StructuredMesh] = None

    def __post_init__(self):
        n = self.stiffness.shape[0]
        if self.stiffness.shape != (n, n) or self.load.shape != (n,):
            raise ShapeMismatchError(f"Subdomain '{self.name}': stiffness {self.stiffness.shape} and load {self.load.shape} disagree")
        for label, idx in (("interface", self.interface), ("dirichlet", self.dirichlet)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise AssemblyError(f"Subdomain '{self.name}': {label} index out of range")
            if idx.size and np.any(np.diff(idx) <= 0):
                raise AssemblyError(f"Subdomain '{self.name}': {label} indices must be sorted and unique")
        overlap = np.intersect1d(self.interface, self.dirichlet)
        if overlap.size:
            raise DirichletConflictError(
                f"Subdomain '{self.name}': {overlap.size} clamped DOFs overlap the interface (first: {int(overlap[0])})"
            )

    @classmethod
    def from_matrices(cls, K, f, interface: Iterable[int] = (), dirichlet: Iterable[int] = (), name: str = "matrix") -> "SubdomainModel":
        """Matrix-level constructor without a mesh (toy and scalar problems)."""
        K = sp.csr_matrix(K, dtype=float)
        f = np.asarray(f, dtype=float).ravel().copy()
        return cls(
            name=name,
            stiffness=K,
            load=_frozen(f),
            interface=_frozen(np.unique(np.asarray(list(interface), dtype=np.int64))),
            dirichlet=_frozen(np.unique(np.asarray(list(dirichlet), dtype=np.int64))),
        )

    @property
    def n_dofs(self) -> int:
        return self.stiffness.shape[0]

    @property
    def free(self) -> np.ndarray:
        """Non-Dirichlet DOFs, i.e. interior and interface."""
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet] = False
        return np.flatnonzero(mask)

    @property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.dirichlet] = False
        mask[self.interface] = False
        return np.flatnonzero(mask)

    def reduced_stiffness(self) -> sp.csc_matrix:
        """Stiffness restricted to the free DOFs (symmetric elimination)."""
        free = self.free
        return self.stiffness[free][:, free].tocsc()

    def expand(self, free_values: np.ndarray) -> np.ndarray:
        """Expands a free-DOF vector to full length with zeros on Dirichlet DOFs."""
        free = self.free
        if free_values.shape != (free.size,):
            raise ShapeMismatchError(f"Expected {free.size} free values, got {free_values.shape}")
        full = np.zeros(self.n_dofs)
        full[free] = free_values
        return full

    def solve(self) -> np.ndarray:
        """Solves K_ff u_f = f_f with the interface treated as free; returns the free-DOF vector."""
        free = self.free
        if free.size == 0:
            return np.zeros(0)
        lu = splu(self.reduced_stiffness(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        return lu.solve(self.load[free])

    def with_interface(self, interface: Iterable[int]) -> "SubdomainModel":
        return replace(self, interface=_frozen(np.unique(np.asarray(list(interface), dtype=np.int64))))


def assemble(mesh: StructuredMesh, materials: MaterialField, body_load: Sequence[float] = (0.0, 0.0, 0.0), name: str = "subdomain") -> SubdomainModel:
    """
    Assembles the global stiffness and consistent body load of a mesh.

    Args:
        mesh: The hexahedral mesh.
        materials: Per-element material data (must match mesh.n_elems).
        body_load: Force density (3-vector).
        name: Subdomain identifier used in diagnostics.

    Returns:
        A SubdomainModel with empty interface and Dirichlet sets.

    Raises:
        ShapeMismatchError: If mesh and materials sizes disagree.
    """
    if materials.n_elems != mesh.n_elems:
        raise ShapeMismatchError(f"Material field has {materials.n_elems} elements, mesh has {mesh.n_elems}")
    body_load = np.asarray(body_load, dtype=float)
    if body_load.shape != (3,):
        raise ShapeMismatchError(f"body_load must be a 3-vector, got shape {body_load.shape}")

    Ke, fe, _ = batch_element_matrices(mesh.element_nodes(), materials.young, materials.poisson, body_load)
    dofs = (3 * mesh.hex_connectivity[:, :, None] + np.arange(3)[None, None, :]).reshape(mesh.n_elems, 24)
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    K.sum_duplicates()
    f = np.zeros(mesh.n_dofs)
    np.add.at(f, dofs.ravel(), fe.ravel())

    logger.debug("Assembled subdomain model", subdomain=name, n_dofs=mesh.n_dofs, nnz=K.nnz)
    return SubdomainModel(
        name=name,
        stiffness=K,
        load=_frozen(f),
        interface=_frozen(np.zeros(0, dtype=np.int64)),
        dirichlet=_frozen(np.zeros(0, dtype=np.int64)),
        mesh=mesh,
    )


def apply_dirichlet(model: SubdomainModel, clamped_dofs: Iterable[int]) -> SubdomainModel:
    """
    Records zero-displacement DOFs; they are eliminated symmetrically from every solve.

    Raises:
        AssemblyError: If an index is out of range.
        DirichletConflictError: If a clamped DOF belongs to the interface.
    """
    clamped = np.unique(np.asarray(list(clamped_dofs), dtype=np.int64))
    if clamped.size == 0:
        return model
    if clamped.min() < 0 or clamped.max() >= model.n_dofs:
        raise AssemblyError(f"Subdomain '{model.name}': clamped DOF index out of range")
    return replace(model, dirichlet=_frozen(np.union1d(model.dirichlet, clamped)))
