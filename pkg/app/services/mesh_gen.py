from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import MeshError
from app.core.logging_config import get_logger

logger = get_logger(__name__)

# Face identifiers of a cube (axis, side) with side 0 = min plane, 1 = max plane
FACES = {
    "-x": (0, 0), "+x": (0, 1),
    "-y": (1, 0), "+y": (1, 1),
    "-z": (2, 0), "+z": (2, 1),
}

# Lexicographic corner order of a hexahedron, right-handed (positive Jacobian)
HEX_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class StructuredMesh:
    """Hexahedral mesh of one cube, nodes numbered x fastest then y then z."""
    node_coords: np.ndarray # (n_nodes, 3)
    hex_connectivity: np.ndarray # (n_elems, 8)
    elems_per_edge: int
    origin: Tuple[float, float, float]
    edge_length: float

    @property
    def n_nodes(self) -> int:
        return self.node_coords.shape[0]

    @property
    def n_elems(self) -> int:
        return self.hex_connectivity.shape[0]

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def element_size(self) -> float:
        return self.edge_length / self.elems_per_edge

    def node_index(self, i: int, j: int, k: int) -> int:
        n = self.elems_per_edge + 1
        return i + n * (j + n * k)

    def lattice(self) -> np.ndarray:
        """Integer (i, j, k) lattice position of every node."""
        n = self.elems_per_edge + 1
        ids = np.arange(self.n_nodes)
        return np.stack([ids % n, (ids // n) % n, ids // (n * n)], axis=1)

    def element_nodes(self) -> np.ndarray:
        """Node coordinates per element, shape (n_elems, 8, 3)."""
        return self.node_coords[self.hex_connectivity]

    def centroids(self) -> np.ndarray:
        return self.element_nodes().mean(axis=1)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.edge_length


@dataclass(frozen=True, eq=False)
class MaterialField:
    """Per-element isotropic material data."""
    young: np.ndarray # (n_elems,)
    poisson: np.ndarray # (n_elems,)
    inclusion_radius_fraction: float = 0.0

    def __post_init__(self):
        if np.any(self.young <= 0.0):
            raise MeshError("Young modulus must be positive on every element.")
        if np.any(self.poisson < 0.0) or np.any(self.poisson >= 0.5):
            raise MeshError("Poisson ratio must lie in [0, 0.5).")

    @property
    def n_elems(self) -> int:
        return self.young.shape[0]

    @classmethod
    def homogeneous(cls, n_elems: int, young: float, poisson: float) -> "MaterialField":
        return cls(
            young=_frozen(np.full(n_elems, float(young))),
            poisson=_frozen(np.full(n_elems, float(poisson))),
        )


@dataclass(frozen=True, eq=False)
class InterfaceSelector:
    """Selected cube faces and the resulting sorted, duplicate-free DOF list."""
    faces: Tuple[str, ...]
    node_ids: np.ndarray
    dofs: np.ndarray = field(repr=False)


def build_cube_mesh(elems_per_edge: int, origin: Sequence[float] = (0.0, 0.0, 0.0), edge_length: float = 1.0) -> StructuredMesh:
    """
    Builds a structured hexahedral mesh of a cube.

    Args:
        elems_per_edge: Number of elements along each edge (>= 1).
        origin: Minimum corner of the cube.
        edge_length: Edge length of the cube (> 0).

    Returns:
        A StructuredMesh with (elems_per_edge+1)^3 nodes and elems_per_edge^3 hexahedra.

    Raises:
        MeshError: If elems_per_edge < 1 or edge_length <= 0.
    """
    if int(elems_per_edge) != elems_per_edge or elems_per_edge < 1:
        raise MeshError(f"elems_per_edge must be an integer >= 1, got {elems_per_edge}")
    if not edge_length > 0.0:
        raise MeshError(f"edge_length must be positive, got {edge_length}")
    ne = int(elems_per_edge)
    n = ne + 1
    origin = tuple(float(c) for c in origin)

    # Index-based coordinates keep shared faces of neighbouring cubes bit-identical
    ticks = edge_length * np.arange(n) / ne
    zz, yy, xx = np.meshgrid(ticks, ticks, ticks, indexing="ij")
    coords = np.stack([xx.ravel() + origin[0], yy.ravel() + origin[1], zz.ravel() + origin[2]], axis=1)

    e = np.arange(ne)
    ek, ej, ei = np.meshgrid(e, e, e, indexing="ij")
    base = np.stack([ei.ravel(), ej.ravel(), ek.ravel()], axis=1) # (n_elems, 3)
    corners = base[:, None, :] + HEX_CORNERS[None, :, :]
    connectivity = corners[..., 0] + n * (corners[..., 1] + n * corners[..., 2])

    mesh = StructuredMesh(
        node_coords=_frozen(coords),
        hex_connectivity=_frozen(connectivity.astype(np.int64)),
        elems_per_edge=ne,
        origin=origin,
        edge_length=float(edge_length),
    )
    logger.debug("Built cube mesh", elems_per_edge=ne, n_nodes=mesh.n_nodes, origin=origin)
    if settings.mesh_dump:
        dump_mesh(mesh, Path(settings.mesh_dump_dir) / _dump_name(mesh))
    return mesh


def assign_inclusion(mesh: StructuredMesh, E_matrix: float, E_ratio: float, nu: float, radius_fraction: float) -> MaterialField:
    """
    Assigns a spherical soft inclusion centred in the cube.

    An element gets E_matrix / E_ratio iff its centroid lies within
    radius_fraction * edge_length / 2 of the cube centre.
    """
    if not 0.0 <= radius_fraction < 1.0:
        raise MeshError(f"radius_fraction must lie in [0, 1), got {radius_fraction}")
    if not E_ratio > 0.0:
        raise MeshError(f"E_ratio must be positive, got {E_ratio}")
    radius = radius_fraction * mesh.edge_length / 2.0
    distance = np.linalg.norm(mesh.centroids() - mesh.center, axis=1)
    inside = distance <= radius if radius_fraction > 0.0 else np.zeros(mesh.n_elems, dtype=bool)
    young = np.where(inside, E_matrix / E_ratio, float(E_matrix))
    logger.debug("Assigned inclusion", inclusion_elements=int(inside.sum()), n_elems=mesh.n_elems)
    return MaterialField(
        young=_frozen(young),
        poisson=_frozen(np.full(mesh.n_elems, float(nu))),
        inclusion_radius_fraction=float(radius_fraction),
    )


def face_node_ids(mesh: StructuredMesh, face: str) -> np.ndarray:
    if face not in FACES:
        raise MeshError(f"Unknown face identifier '{face}', expected one of {sorted(FACES)}")
    axis, side = FACES[face]
    target = 0 if side == 0 else mesh.elems_per_edge
    return np.flatnonzero(mesh.lattice()[:, axis] == target)


def nodes_to_dofs(node_ids: Iterable[int]) -> np.ndarray:
    node_ids = np.asarray(list(node_ids) if not isinstance(node_ids, np.ndarray) else node_ids, dtype=np.int64)
    return (3 * node_ids[:, None] + np.arange(3)[None, :]).ravel()


def extract_interface(mesh: StructuredMesh, selector: Iterable[str]) -> InterfaceSelector:
    """
    Extracts the sorted unique DOFs of the nodes lying on the selected faces.

    Raises:
        MeshError: If the selector is empty or names an unknown face.
    """
    faces = tuple(dict.fromkeys(selector))
    if not faces:
        raise MeshError("Interface selector must name at least one face.")
    node_ids = np.unique(np.concatenate([face_node_ids(mesh, f) for f in faces]))
    return InterfaceSelector(faces=faces, node_ids=_frozen(node_ids), dofs=_frozen(nodes_to_dofs(node_ids)))


def _dump_name(mesh: StructuredMesh) -> str:
    ox, oy, oz = mesh.origin
    return f"cube_n{mesh.elems_per_edge}_{ox:g}_{oy:g}_{oz:g}.txt"


def dump_mesh(mesh: StructuredMesh, path: Path) -> Path:
    """Writes one node or element per line for inspection."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for i, (x, y, z) in enumerate(mesh.node_coords):
            handle.write(f"node {i} {x:.17g} {y:.17g} {z:.17g}\n")
        for e, nodes in enumerate(mesh.hex_connectivity):
            handle.write(f"hex {e} " + " ".join(str(int(n)) for n in nodes) + "\n")
    logger.debug("Dumped mesh", path=str(path))
    return path
