import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.core.config import settings
from app.core.exceptions import MeshError
from app.services.mesh_gen import (
    assign_inclusion,
    build_cube_mesh,
    extract_interface,
    face_node_ids,
    nodes_to_dofs,
)


def test_build_cube_mesh_single_element():
    mesh = build_cube_mesh(1)
    assert mesh.n_nodes == 8
    assert mesh.n_elems == 1
    assert_allclose(mesh.node_coords[1], [1.0, 0.0, 0.0])
    assert_allclose(mesh.node_coords[2], [0.0, 1.0, 0.0])
    assert_allclose(mesh.node_coords[4], [0.0, 0.0, 1.0])
    # right-handed corner order
    assert_array_equal(mesh.hex_connectivity[0], [0, 1, 3, 2, 4, 5, 7, 6])


def test_build_cube_mesh_counts_and_x_fastest_numbering():
    mesh = build_cube_mesh(3, origin=(1.0, 2.0, 3.0), edge_length=2.0)
    assert mesh.n_nodes == 64
    assert mesh.n_elems == 27
    assert mesh.n_dofs == 192
    assert_allclose(mesh.node_coords[0], [1.0, 2.0, 3.0])
    assert_allclose(mesh.node_coords[mesh.node_index(1, 0, 0)], [1.0 + 2.0 / 3.0, 2.0, 3.0])
    assert_allclose(mesh.node_coords[-1], [3.0, 4.0, 5.0])
    assert mesh.node_index(1, 2, 3) == 1 + 4 * (2 + 4 * 3)


def test_mesh_arrays_are_read_only():
    mesh = build_cube_mesh(2)
    with pytest.raises(ValueError):
        mesh.node_coords[0, 0] = 5.0


@pytest.mark.parametrize("bad", [0, -1, 2.5])
def test_build_cube_mesh_rejects_bad_resolution(bad):
    with pytest.raises(MeshError, match="elems_per_edge"):
        build_cube_mesh(bad)


def test_build_cube_mesh_rejects_non_positive_edge():
    with pytest.raises(MeshError, match="edge_length"):
        build_cube_mesh(2, edge_length=0.0)


def test_shared_face_of_neighbouring_cubes_is_bit_identical():
    left = build_cube_mesh(4, origin=(0.0, 0.0, 0.0))
    right = build_cube_mesh(4, origin=(1.0, 0.0, 0.0))
    a = left.node_coords[face_node_ids(left, "+x")]
    b = right.node_coords[face_node_ids(right, "-x")]
    assert_array_equal(a, b)


def test_face_node_ids_and_unknown_face():
    mesh = build_cube_mesh(2)
    ids = face_node_ids(mesh, "-z")
    assert ids.size == 9
    assert np.all(mesh.node_coords[ids, 2] == 0.0)
    with pytest.raises(MeshError, match="Unknown face"):
        face_node_ids(mesh, "top")


def test_extract_interface_sorted_unique_dofs():
    mesh = build_cube_mesh(2)
    selector = extract_interface(mesh, ["+x", "+y", "+x"])
    assert selector.faces == ("+x", "+y")
    # two faces of 9 nodes sharing an edge of 3 nodes
    assert selector.node_ids.size == 15
    assert selector.dofs.size == 45
    assert np.all(np.diff(selector.dofs) > 0)
    assert_array_equal(selector.dofs[:3], nodes_to_dofs([selector.node_ids[0]]))


def test_extract_interface_rejects_empty_selector():
    with pytest.raises(MeshError, match="at least one face"):
        extract_interface(build_cube_mesh(1), [])


def test_nodes_to_dofs_interleaves_components():
    assert_array_equal(nodes_to_dofs([0, 2]), [0, 1, 2, 6, 7, 8])


def test_assign_inclusion_softens_centre_elements():
    mesh = build_cube_mesh(4)
    materials = assign_inclusion(mesh, E_matrix=10.0, E_ratio=10.0, nu=0.3, radius_fraction=0.5)
    centre = np.linalg.norm(mesh.centroids() - mesh.center, axis=1) <= 0.25
    assert centre.sum() == 8
    assert_allclose(materials.young[centre], 1.0)
    assert_allclose(materials.young[~centre], 10.0)
    assert_allclose(materials.poisson, 0.3)


def test_assign_inclusion_zero_radius_is_homogeneous():
    mesh = build_cube_mesh(3)
    materials = assign_inclusion(mesh, 2.0, 10.0, 0.25, 0.0)
    assert_allclose(materials.young, 2.0)


@pytest.mark.parametrize("elems, expected", [(2, 0), (4, 8), (8, 32)])
def test_assign_inclusion_counts(elems, expected):
    mesh = build_cube_mesh(elems)
    materials = assign_inclusion(mesh, 1.0, 10.0, 0.3, 0.5)
    assert int((materials.young < 1.0).sum()) == expected


@pytest.mark.parametrize("axes", [(0, 2, 1), (1, 0, 2), (2, 1, 0), (1, 2, 0), (2, 0, 1)])
def test_assign_inclusion_is_invariant_under_axis_permutation(axes):
    n = 5
    mesh = build_cube_mesh(n, origin=(0.5, -2.0, 1.0), edge_length=3.0)
    young = assign_inclusion(mesh, 1.0, 4.0, 0.3, 0.6).young.reshape(n, n, n)
    assert 0 < (young < 1.0).sum() < n**3
    assert_array_equal(young.transpose(axes), young)


@pytest.mark.parametrize("kwargs", [
    {"radius_fraction": 1.0},
    {"radius_fraction": -0.1},
    {"E_ratio": 0.0},
    {"nu": 0.5},
])
def test_assign_inclusion_rejects_bad_parameters(kwargs):
    params = {"E_matrix": 1.0, "E_ratio": 10.0, "nu": 0.3, "radius_fraction": 0.5}
    params.update(kwargs)
    with pytest.raises(MeshError):
        assign_inclusion(build_cube_mesh(2), **params)


def test_mesh_dump_writes_nodes_and_elements(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "mesh_dump", True)
    monkeypatch.setattr(settings, "mesh_dump_dir", str(tmp_path))
    build_cube_mesh(1, origin=(1.0, 0.0, 0.0))
    dumps = list(tmp_path.iterdir())
    assert len(dumps) == 1
    lines = dumps[0].read_text().splitlines()
    assert len(lines) == 9
    assert lines[0].startswith("node 0 1 0 0")
    assert lines[-1] == "hex 0 0 1 3 2 4 5 7 6"
