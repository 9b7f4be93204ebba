import hashlib
import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from app.core.config import settings
from app.core.exceptions import CondensationError, CouplingError, InterfaceGeometryError, ShapeMismatchError
from app.core.logging_config import get_logger
from app.services.condensation import SchurHandle, condense
from app.services.fem_assembly import SubdomainModel, apply_dirichlet, assemble
from app.services.mesh_gen import FACES, MaterialField, assign_inclusion, build_cube_mesh, face_node_ids, nodes_to_dofs

logger = get_logger(__name__)

Cube = Tuple[int, int, int]


@dataclass(frozen=True)
class PatchLayout:
    """
    Beam made of grid[0] x grid[1] x grid[2] cubes. Cubes listed in `patches` carry a
    fine model; the others form the complementary zone. `patches=None` covers all.
    """
    grid: Tuple[int, int, int]
    edge_length: float = 1.0
    patches: Optional[Tuple[Cube, ...]] = None
    clamped_face: str = "-z"

    def __post_init__(self):
        if len(self.grid) != 3 or any(int(n) < 1 for n in self.grid):
            raise CouplingError(f"Grid dimensions must be three integers >= 1, got {self.grid}")
        if int(np.prod(self.grid)) < 2:
            raise CouplingError("At least two cubes are needed to form a coupling interface.")
        if self.clamped_face not in FACES:
            raise CouplingError(f"Unknown clamped face '{self.clamped_face}'")
        if self.patches is not None:
            for cube in self.patches:
                if not all(0 <= c < n for c, n in zip(cube, self.grid)):
                    raise CouplingError(f"Patch cube {cube} lies outside grid {self.grid}")

    def cubes(self) -> List[Cube]:
        """All cubes, x index fastest."""
        nx, ny, nz = self.grid
        return [(i, j, k) for k in range(nz) for j in range(ny) for i in range(nx)]

    def patch_cubes(self) -> List[Cube]:
        if self.patches is None:
            return self.cubes()
        wanted = set(tuple(c) for c in self.patches)
        return [c for c in self.cubes() if c in wanted]

    def origin(self, cube: Cube) -> Tuple[float, float, float]:
        return tuple(float(c) * self.edge_length for c in cube)

    def interface_faces(self, cube: Cube) -> List[str]:
        """Faces of a cube shared with a neighbouring cube."""
        faces = []
        for face, (axis, side) in FACES.items():
            neighbour = cube[axis] + (1 if side == 1 else -1)
            if 0 <= neighbour < self.grid[axis]:
                faces.append(face)
        return faces

    def clamped_faces(self, cube: Cube) -> List[str]:
        """Faces of a cube lying on the clamped face of the beam."""
        axis, side = FACES[self.clamped_face]
        boundary = 0 if side == 0 else self.grid[axis] - 1
        return [self.clamped_face] if cube[axis] == boundary else []


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class InterfaceSpace:
    """
    Global interface numbering with per-subdomain assembly maps (global x local
    boundary, boolean) and per-patch interpolators (fine boundary x coarse boundary).
    J rows of fine nodes next to a clamped coarse node sum to less than 1: the
    clamped node carries zero displacement and has no column.
    """
    n_global: int
    assembly: Tuple[sp.csr_matrix, ...]
    interpolators: Tuple[sp.csr_matrix, ...]
    has_complementary: bool
    node_coords: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_maps(cls, n_global: int, assembly: Sequence, interpolators: Sequence, has_complementary: bool) -> "InterfaceSpace":
        """Builds a space from explicit matrices (toy problems)."""
        return cls(
            n_global=int(n_global),
            assembly=tuple(sp.csr_matrix(A, dtype=float) for A in assembly),
            interpolators=tuple(sp.csr_matrix(J, dtype=float) for J in interpolators),
            has_complementary=bool(has_complementary),
        )

    def restrict(self, s: int, u_A: np.ndarray) -> np.ndarray:
        """Local boundary trace A^(s)T u_A of coarse subdomain s."""
        return self.assembly[s].T @ u_A

    def extend(self, s: int, y: np.ndarray) -> np.ndarray:
        """Global contribution A^(s) y of a local boundary vector."""
        return self.assembly[s] @ y


def _interface_nodes(model: SubdomainModel) -> np.ndarray:
    return model.interface[::3] // 3


def _interpolator(coarse: SubdomainModel, fine: SubdomainModel) -> sp.csr_matrix:
    """Evaluates coarse trilinear (bilinear on faces) shape functions at fine interface nodes."""
    cmesh, fmesh = coarse.mesh, fine.mesh
    if not np.allclose(cmesh.origin, fmesh.origin) or not np.isclose(cmesh.edge_length, fmesh.edge_length):
        raise InterfaceGeometryError(f"Fine patch '{fine.name}' does not cover coarse cube '{coarse.name}'")
    ratio, remainder = divmod(fmesh.elems_per_edge, cmesh.elems_per_edge)
    if remainder:
        raise InterfaceGeometryError(
            f"Fine patch '{fine.name}' ({fmesh.elems_per_edge} elems/edge) is not an integer refinement "
            f"of '{coarse.name}' ({cmesh.elems_per_edge} elems/edge)"
        )
    n_c = cmesh.elems_per_edge
    coarse_nodes = _interface_nodes(coarse)
    coarse_pos = {int(n): k for k, n in enumerate(coarse_nodes)}
    clamped_nodes = set((coarse.dirichlet[::3] // 3).tolist())

    fine_lattice = fmesh.lattice()[_interface_nodes(fine)]
    rows, cols, vals = [], [], []
    for m, ijk in enumerate(fine_lattice):
        elem = np.minimum(ijk // ratio, n_c - 1)
        t = (ijk - elem * ratio) / ratio
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            for d in range(3):
                w *= t[d] if corner[d] else 1.0 - t[d]
            if w == 0.0:
                continue
            lat = elem + np.array(corner)
            node = cmesh.node_index(*(int(v) for v in lat))
            if node in coarse_pos:
                for comp in range(3):
                    rows.append(3 * m + comp)
                    cols.append(3 * coarse_pos[node] + comp)
                    vals.append(w)
            elif node not in clamped_nodes: # clamped coarse nodes carry zero displacement
                raise InterfaceGeometryError(
                    f"Fine interface node {m} of '{fine.name}' depends on coarse node {node} off the interface",
                    pair=(fine.name, coarse.name),
                )
    shape = (fine.interface.size, coarse.interface.size)
    return sp.csr_matrix((vals, (rows, cols)), shape=shape)


def build_interface_space(coarse_models: Sequence[SubdomainModel], fine_models: Sequence[SubdomainModel], patch_of: Sequence[int]) -> InterfaceSpace:
    """
    Numbers the global interface by deduplicated node position and builds A and J.

    Args:
        coarse_models: All coarse subdomains (meshes required).
        fine_models: Fine patches.
        patch_of: For each fine model, the index of the coarse subdomain it replaces.

    Returns:
        The InterfaceSpace.

    Raises:
        InterfaceGeometryError: If node positions are inconsistent or J cannot be built.
    """
    if len(fine_models) != len(patch_of):
        raise ShapeMismatchError("Every fine model needs the index of its coarse subdomain.")
    edge = max(m.mesh.edge_length for m in coarse_models)
    tol = settings.interface_tol * edge

    local_coords = [m.mesh.node_coords[_interface_nodes(m)] for m in coarse_models]
    all_coords = np.concatenate(local_coords, axis=0)
    keys = np.round(all_coords / tol).astype(np.int64)
    unique_keys, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = np.asarray(inverse).ravel()
    representatives = all_coords[first]

    # Distinct global nodes closer than the tolerance mean the geometry disagrees
    pairs = cKDTree(representatives).query_pairs(r=2.0 * tol)
    if pairs:
        a, b = sorted(pairs)[0]
        raise InterfaceGeometryError(
            f"Interface nodes {representatives[a].tolist()} and {representatives[b].tolist()} are within "
            f"tolerance but were not merged",
            pair=(int(a), int(b)),
        )

    n_nodes = unique_keys.shape[0]
    n_global = 3 * n_nodes
    assembly = []
    touched = np.zeros(n_nodes, dtype=int)
    offset = 0
    for model, coords in zip(coarse_models, local_coords):
        gnodes = inverse[offset:offset + coords.shape[0]]
        offset += coords.shape[0]
        touched[gnodes] += 1
        rows = nodes_to_dofs(gnodes)
        cols = np.arange(rows.size)
        assembly.append(sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n_global, rows.size)))

    has_complementary = len(set(patch_of)) < len(coarse_models)
    minimum = 2 if has_complementary else 1
    if touched.min() < minimum:
        raise InterfaceGeometryError(f"Some interface nodes are touched by fewer than {minimum} subdomains")

    interpolators = tuple(_interpolator(coarse_models[s], fine) for fine, s in zip(fine_models, patch_of))
    logger.info("Built interface space", n_global=n_global, n_subdomains=len(coarse_models),
                n_patches=len(fine_models), has_complementary=has_complementary)
    return InterfaceSpace(
        n_global=n_global,
        assembly=tuple(assembly),
        interpolators=interpolators,
        has_complementary=has_complementary,
        node_coords=_frozen(representatives),
    )


@dataclass
class ReferenceSolution:
    interface_displacement: np.ndarray
    fine_fields: List[np.ndarray]


@dataclass
class CouplingState:
    """Coordinator-side iteration state. Every vector has the global interface length."""
    p: np.ndarray
    omega: float
    u_A: Optional[np.ndarray] = None
    r: Optional[np.ndarray] = None # last residual used in an update
    j: int = 0

    @classmethod
    def initial(cls, n_interface: int, omega: float) -> "CouplingState":
        return cls(p=np.zeros(n_interface), omega=float(omega))

    def relax(self, r: np.ndarray) -> None:
        """p += omega * r."""
        if r.shape != self.p.shape:
            raise ShapeMismatchError(f"Residual of shape {r.shape} does not match p_A {self.p.shape}")
        self.p = self.p + self.omega * r
        self.r = r


class CouplingProblem:
    """
    Coarse handles for every subdomain, fine handles for the patches, the interface
    space, and the assembled global (S^G, b^G) and reference rhs b^R.
    Immutable after construction; solve methods are read-only.
    """

    def __init__(self, coarse: Sequence[SchurHandle], fine: Sequence[SchurHandle], patch_of: Sequence[int], space: InterfaceSpace, name: str = "problem"):
        if len(fine) != len(patch_of) or len(fine) != len(space.interpolators):
            raise ShapeMismatchError("fine handles, patch indices and interpolators must align")
        if len(coarse) != len(space.assembly):
            raise ShapeMismatchError("coarse handles and assembly maps must align")
        self.name = name
        self.coarse = tuple(coarse)
        self.fine = tuple(fine)
        self.patch_of = tuple(int(s) for s in patch_of)
        self.space = space
        self.complementary = tuple(s for s in range(len(coarse)) if s not in set(self.patch_of))
        self.has_complementary = bool(self.complementary)
        self._check_shapes()

        self.global_operator = self._assemble(lambda s: self.coarse[s].schur_operator(), range(len(coarse)))
        self.global_rhs = _frozen(sum((space.extend(s, self.coarse[s].rhs) for s in range(len(coarse))), np.zeros(space.n_global)))
        reference_rhs = sum((space.extend(s, self.coarse[s].rhs) for s in self.complementary), np.zeros(space.n_global))
        for k, s in enumerate(self.patch_of):
            reference_rhs = reference_rhs + space.extend(s, space.interpolators[k].T @ self.fine[k].rhs)
        self.reference_rhs = _frozen(reference_rhs)

        try:
            self._global_lu = splu(self.global_operator.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                   options={"SymmetricMode": True})
        except RuntimeError as e:
            logger.error("Global condensed operator is singular", problem=name, error=str(e))
            raise CondensationError(f"Global condensed operator S^G of '{name}' is singular; add Dirichlet conditions") from e
        self._reference: Optional[ReferenceSolution] = None
        logger.info("Coupling problem ready", problem=name, **self.summary())

    def _check_shapes(self):
        for s, handle in enumerate(self.coarse):
            if self.space.assembly[s].shape[1] != handle.n_interface:
                raise ShapeMismatchError(f"Assembly map {s} does not match coarse subdomain '{handle.name}'")
        for k, (handle, s) in enumerate(zip(self.fine, self.patch_of)):
            if self.space.interpolators[k].shape != (handle.n_interface, self.coarse[s].n_interface):
                raise ShapeMismatchError(f"Interpolator {k} does not match patch '{handle.name}'")

    def _assemble(self, local_operator, subdomains) -> sp.csr_matrix:
        n = self.space.n_global
        total = sp.csr_matrix((n, n))
        for s in subdomains:
            A = self.space.assembly[s]
            total = total + A @ sp.csr_matrix(local_operator(s)) @ A.T
        return total.tocsr()

    @property
    def n_patches(self) -> int:
        return len(self.fine)

    @property
    def n_interface(self) -> int:
        return self.space.n_global

    def complementary_sizes(self) -> List[int]:
        return [self.coarse[c].n_interface for c in self.complementary]

    def summary(self) -> Dict[str, object]:
        coarse_dofs = sum(h.model.n_dofs for h in self.coarse)
        fine_dofs = sum(h.model.n_dofs for h in self.fine)
        return {
            "n_interface": self.n_interface,
            "n_subdomains": len(self.coarse),
            "n_patches": self.n_patches,
            "coarse_dofs": coarse_dofs,
            "fine_dofs": fine_dofs,
            "total_dofs": coarse_dofs + fine_dofs,
            "patch_dofs": [h.model.n_dofs for h in self.fine],
        }

    def fingerprint(self) -> str:
        """sha256 over the data every engine consumes, fine stiffness and loads included."""
        digest = hashlib.sha256()
        G = self.global_operator
        for array in (G.indptr, G.indices, G.data, self.global_rhs, self.reference_rhs):
            digest.update(np.ascontiguousarray(array).tobytes())
        for J in self.space.interpolators:
            digest.update(np.ascontiguousarray(J.data).tobytes())
        for handle in self.fine:
            K = handle.model.stiffness.tocsr()
            for array in (K.indptr, K.indices, K.data, handle.model.load, handle.interface, handle.model.dirichlet):
                digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def _check_global(self, vector: np.ndarray, label: str) -> np.ndarray:
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.n_interface,):
            raise ShapeMismatchError(f"{label} must have global interface length {self.n_interface}, got {vector.shape}")
        return vector

    def _check_patch(self, k: int) -> int:
        if not 0 <= int(k) < self.n_patches:
            raise CouplingError(f"Invalid patch index {k}; problem has {self.n_patches} patches")
        return int(k)

    # Coupling operations

    def global_solve(self, p_A: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """u_A = S^G^-1 (b^G + p_A), plus the stacked complementary reactions when Omega^(0) exists."""
        p_A = self._check_global(p_A, "p_A")
        u_A = self._global_lu.solve(self.global_rhs + p_A)
        if not self.has_complementary:
            return u_A, None
        lam0 = np.concatenate([self.coarse[c].reaction(self.space.restrict(c, u_A)) for c in self.complementary])
        return u_A, lam0

    def coarse_trace(self, k: int, u_A: np.ndarray) -> np.ndarray:
        """Coarse local trace A^(s)T u_A sent to patch k."""
        k = self._check_patch(k)
        return self.space.restrict(self.patch_of[k], self._check_global(u_A, "u_A"))

    def fine_reaction_from_trace(self, k: int, coarse_trace: np.ndarray) -> np.ndarray:
        """Fine Dirichlet solve with u_b^F = J^(s) coarse_trace; returns lambda_F."""
        k = self._check_patch(k)
        return self.fine[k].reaction(self.space.interpolators[k] @ coarse_trace)

    def fine_local_solve(self, k: int, u_A: np.ndarray) -> np.ndarray:
        return self.fine_reaction_from_trace(k, self.coarse_trace(k, u_A))

    def assemble_residual(self, lam0: Optional[np.ndarray], fine_reactions: Sequence[np.ndarray]) -> np.ndarray:
        """r = -A^(0) lambda^(0) - sum_s A^(s) J^(s)T lambda_F^(s)."""
        if (lam0 is not None) != self.has_complementary:
            raise ShapeMismatchError("lambda^(0) must be given iff the problem has a complementary zone")
        if len(fine_reactions) != self.n_patches:
            raise ShapeMismatchError(f"Expected {self.n_patches} fine reactions, got {len(fine_reactions)}")
        r = np.zeros(self.n_interface)
        if lam0 is not None:
            sizes = self.complementary_sizes()
            lam0 = np.asarray(lam0, dtype=float)
            if lam0.shape != (sum(sizes),):
                raise ShapeMismatchError(f"lambda^(0) must have length {sum(sizes)}, got {lam0.shape}")
            for c, part in zip(self.complementary, np.split(lam0, np.cumsum(sizes)[:-1])):
                r -= self.space.extend(c, part)
        for k, lam in enumerate(fine_reactions):
            lam = np.asarray(lam, dtype=float)
            if lam.shape != (self.fine[k].n_interface,):
                raise ShapeMismatchError(f"Fine reaction {k} must have length {self.fine[k].n_interface}, got {lam.shape}")
            r -= self.space.extend(self.patch_of[k], self.space.interpolators[k].T @ lam)
        return r

    def stale_correction(self, k: int, u_now: np.ndarray, u_then: np.ndarray) -> np.ndarray:
        """
        A^(s) S^(s),G A^(s)T (u_now - u_then): how much the coarse reaction of the cube
        under patch k moved since the trace u_then that a stale fine reaction answered.
        """
        k = self._check_patch(k)
        s = self.patch_of[k]
        du = self._check_global(u_now, "u_now") - self._check_global(u_then, "u_then")
        return self.space.extend(s, self.coarse[s].apply(self.space.restrict(s, du)))

    def reference_operator(self) -> sp.csr_matrix:
        """S^R = A0 S0 A0^T + sum A J^T S^F J A^T (explicit, oracle only)."""
        n = self.n_interface
        total = self._assemble(lambda s: self.coarse[s].dense_schur(), self.complementary) if self.complementary else sp.csr_matrix((n, n))
        for k, s in enumerate(self.patch_of):
            J = self.space.interpolators[k]
            local = J.T @ sp.csr_matrix(self.fine[k].dense_schur()) @ J
            A = self.space.assembly[s]
            total = total + A @ local @ A.T
        return total.tocsr()

    def fine_fields(self, u_A: np.ndarray) -> List[np.ndarray]:
        """Full fine displacement of every patch under the interpolated trace of u_A."""
        return [
            self.fine[k].interior_recovery(self.space.interpolators[k] @ self.coarse_trace(k, u_A))
            for k in range(self.n_patches)
        ]


def global_solve(problem: CouplingProblem, p_A: np.ndarray):
    return problem.global_solve(p_A)


def fine_local_solve(problem: CouplingProblem, k: int, u_A: np.ndarray) -> np.ndarray:
    return problem.fine_local_solve(k, u_A)


def assemble_residual(problem: CouplingProblem, lam0: Optional[np.ndarray], fine_reactions: Sequence[np.ndarray]) -> np.ndarray:
    return problem.assemble_residual(lam0, fine_reactions)


def reference_solve(problem: CouplingProblem) -> ReferenceSolution:
    """
    Solves the assembled reference condensed system S^R u_R = b^R (oracle).

    Raises:
        CouplingError: If the problem exceeds the oracle DOF cap.
        CondensationError: If S^R is singular.
    """
    if problem._reference is not None:
        return problem._reference
    total = problem.summary()["total_dofs"]
    if total > settings.oracle_dof_cap:
        raise CouplingError(f"Problem '{problem.name}' has {total} DOFs, above the oracle cap {settings.oracle_dof_cap}")
    S_R = problem.reference_operator()
    try:
        lu = splu(S_R.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
    except RuntimeError as e:
        logger.error("Reference operator is singular", problem=problem.name, error=str(e))
        raise CondensationError(f"Reference operator S^R of '{problem.name}' is singular") from e
    u_R = lu.solve(problem.reference_rhs)
    solution = ReferenceSolution(interface_displacement=u_R, fine_fields=problem.fine_fields(u_R))
    problem._reference = solution
    logger.info("Reference solution computed", problem=problem.name, norm=float(np.linalg.norm(u_R)))
    return solution


def submodel_solve(problem: CouplingProblem) -> ReferenceSolution:
    """One-way coarse to fine zoom: p_A = 0 global solve, then Dirichlet fine solves."""
    u_A, _ = problem.global_solve(np.zeros(problem.n_interface))
    return ReferenceSolution(interface_displacement=u_A, fine_fields=problem.fine_fields(u_A))


def _cube_model(mesh, materials: MaterialField, layout: PatchLayout, cube: Cube, body_load, name: str) -> SubdomainModel:
    model = assemble(mesh, materials, body_load, name=name)
    clamped_nodes = np.unique(np.concatenate([face_node_ids(mesh, f) for f in layout.clamped_faces(cube)] or [np.zeros(0, dtype=np.int64)]))
    interface_nodes = np.unique(np.concatenate([face_node_ids(mesh, f) for f in layout.interface_faces(cube)]))
    interface_nodes = np.setdiff1d(interface_nodes, clamped_nodes)
    model = apply_dirichlet(model, nodes_to_dofs(clamped_nodes))
    return model.with_interface(nodes_to_dofs(interface_nodes))


def build_beam_problem(
    layout: PatchLayout,
    coarse_elems: int,
    fine_elems: int,
    E_matrix: float = 1.0,
    E_ratio: float = 10.0,
    nu: float = 0.3,
    radius_fraction: float = 0.5,
    body_load: Sequence[float] = (1.0, 1.0, 1.0),
    name: str = "beam",
) -> CouplingProblem:
    """
    Builds the heterogeneous beam: homogeneous coarse cubes, fine patches with a soft
    spherical inclusion, one clamped face, interfaces on shared cube faces.
    """
    logger.info("Building beam problem", problem=name, grid=layout.grid, coarse_elems=coarse_elems, fine_elems=fine_elems)
    cubes = layout.cubes()
    coarse_models = []
    for cube in cubes:
        mesh = build_cube_mesh(coarse_elems, layout.origin(cube), layout.edge_length)
        materials = MaterialField.homogeneous(mesh.n_elems, E_matrix, nu)
        coarse_models.append(_cube_model(mesh, materials, layout, cube, body_load, name=f"coarse{cube}"))

    fine_models, patch_of = [], []
    for cube in layout.patch_cubes():
        mesh = build_cube_mesh(fine_elems, layout.origin(cube), layout.edge_length)
        materials = assign_inclusion(mesh, E_matrix, E_ratio, nu, radius_fraction)
        fine_models.append(_cube_model(mesh, materials, layout, cube, body_load, name=f"fine{cube}"))
        patch_of.append(cubes.index(cube))

    space = build_interface_space(coarse_models, fine_models, patch_of)
    coarse = [condense(m) for m in coarse_models]
    fine = [condense(m) for m in fine_models]
    return CouplingProblem(coarse, fine, patch_of, space, name=name)
