import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from surfelsplat.mesh import (
    DegenerateFaceError,
    MeshError,
    NonManifoldError,
    ObjParseError,
    TriangleMesh,
    face_plane,
    face_planes,
    load_mesh,
    loop_operator,
    loop_subdivide,
    loop_subdivision,
    mesh_sequence_topology_matches,
    save_mesh,
)

from conftest import write_obj


def test_load_minimal_obj(tmp_path):
    p = write_obj(tmp_path / "t.obj", [(0, 0, 0), (1, 0, 0), (0, 1, 0)], [(0, 1, 2)], extra="# comment\nvn 0 0 1\n")
    m = load_mesh(p)
    assert (m.n_vertices, m.n_faces) == (3, 1)
    np.testing.assert_array_equal(m.vertices[1], [1, 0, 0])


def test_load_rejects_quad(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ObjParseError, match="non-triangular face"):
        load_mesh(p)


@pytest.mark.parametrize("body", [
    "v 0 0\nf 1 2 3\n",
    "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 x\n",
    "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -1 -2 -3\n",
])
def test_load_parse_errors(tmp_path, body):
    p = tmp_path / "bad.obj"
    p.write_text(body)
    with pytest.raises(ObjParseError):
        load_mesh(p)


def test_load_index_out_of_range(tmp_path):
    p = tmp_path / "r.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(MeshError, match="out of range"):
        load_mesh(p)


def test_repeated_index_rejected():
    with pytest.raises(MeshError):
        TriangleMesh(np.eye(3), [[0, 0, 1]])


def test_obj_roundtrip(tmp_path, ico):
    save_mesh(ico, tmp_path / "ico.obj")
    back = load_mesh(tmp_path / "ico.obj")
    np.testing.assert_array_equal(back.vertices, ico.vertices)
    np.testing.assert_array_equal(back.faces, ico.faces)


def test_icosahedron_euler(ico):
    assert (ico.n_vertices, ico.n_faces) == (12, 20)
    edges = {tuple(sorted((f[k], f[(k + 1) % 3]))) for f in ico.faces.tolist() for k in range(3)}
    assert len(edges) == 30
    assert ico.n_vertices - len(edges) + ico.n_faces == 2
    assert ico.euler_characteristic() == 2
    assert ico.is_consistently_oriented()


def test_icosahedron_outward(ico):
    c, n, _ = face_planes(ico.vertices, ico.faces)
    assert np.all(np.sum(c * n, axis=1) > 0)


def test_loop_counts(ico):
    m = loop_subdivide(ico, 1)
    assert (m.n_faces, m.n_vertices) == (80, 42)
    m2 = loop_subdivide(ico, 2)
    assert (m2.n_faces, m2.n_vertices) == (320, 162)
    assert m2.is_consistently_oriented()
    assert m2.euler_characteristic() == 2


def test_loop_zero_iterations_identity(ico):
    m = loop_subdivide(ico, 0)
    np.testing.assert_array_equal(m.vertices, ico.vertices)
    np.testing.assert_array_equal(m.faces, ico.faces)


def test_loop_negative_iterations(ico):
    with pytest.raises(ValueError):
        loop_subdivision(ico, -1)


def test_loop_boundary_triangle():
    h = np.sqrt(3) / 2
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0]], dtype=float)
    m = TriangleMesh(v, [[0, 1, 2]])
    out = loop_subdivide(m, 1)
    assert out.n_faces == 4
    mids = out.vertices[3:]
    expect = {tuple(np.round((v[a] + v[b]) / 2, 12)) for a, b in [(0, 1), (1, 2), (0, 2)]}
    assert {tuple(np.round(p, 12)) for p in mids} == expect
    # even corners: 3/4 self + 1/8 each boundary neighbour
    np.testing.assert_allclose(out.vertices[0], 0.75 * v[0] + 0.125 * (v[1] + v[2]), atol=1e-15)
    assert out.boundary_loops() == m.boundary_loops() == 1


def test_loop_interior_stencils_exact():
    # regular valence-6 vertex in the middle of a hexagonal fan
    ang = np.arange(6) * np.pi / 3
    ring = np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])
    v = np.vstack([[0, 0, 1.0], ring])
    f = [[0, 1 + k, 1 + (k + 1) % 6] for k in range(6)]
    S, _ = loop_operator(TriangleMesh(v, f))
    row = S[0].toarray().ravel()
    beta = (5 / 8 - (3 / 8 + np.cos(2 * np.pi / 6) / 4) ** 2) / 6
    assert row[0] == pytest.approx(1 - 6 * beta, abs=1e-15)
    np.testing.assert_allclose(row[1:], beta, atol=1e-15)
    assert beta == pytest.approx(1 / 16)


def test_loop_stencils_convex(ico):
    for it in (1, 2):
        S = loop_subdivision(ico, it).operator
        assert S.min() >= 0.0
        np.testing.assert_allclose(np.asarray(S.sum(axis=1)).ravel(), 1.0, atol=1e-12)


def test_loop_nonmanifold_rejected():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1]], dtype=float)
    f = [[0, 1, 2], [1, 0, 3], [0, 1, 4]]
    with pytest.raises(NonManifoldError):
        loop_subdivide(TriangleMesh(v, f), 1)


def test_loop_preserves_boundary_loops_and_orientation(ico):
    open_mesh = TriangleMesh(ico.vertices, ico.faces[1:])
    out = loop_subdivide(open_mesh, 2)
    assert out.boundary_loops() == open_mesh.boundary_loops() == 1
    assert out.is_consistently_oriented()


def test_subdivision_operator_reused_across_frames(ico):
    sub = loop_subdivision(ico, 2)
    moved = ico.vertices * 2.0 + 1.0
    a = sub.apply(moved)
    b = loop_subdivide(ico.with_vertices(moved), 2)
    np.testing.assert_allclose(a.vertices, b.vertices, atol=1e-13)


def test_face_plane_right_triangle():
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
    c, n, a = face_plane(m, 0)
    np.testing.assert_allclose(c, [1 / 3, 1 / 3, 0])
    np.testing.assert_allclose(n, [0, 0, 1])
    assert a == 0.5


def test_face_plane_centroid_is_vertex_mean():
    m = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    np.testing.assert_allclose(face_plane(m, 0)[0], [1, 1, 0])


def test_face_plane_degenerate():
    m = TriangleMesh([[0, 0, 0], [1, 1, 1], [2, 2, 2]], [[0, 1, 2]])
    with pytest.raises(DegenerateFaceError):
        face_plane(m, 0)
    with pytest.raises(IndexError):
        face_plane(m, 1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=9, max_size=9))
def test_face_plane_unit_normal_and_winding(xs):
    v = np.array(xs).reshape(3, 3)
    if 0.5 * np.linalg.norm(np.cross(v[1] - v[0], v[2] - v[0])) < 1e-6:
        return
    c, n, a = face_plane(TriangleMesh(v, [[0, 1, 2]]), 0)
    c2, n2, a2 = face_plane(TriangleMesh(v, [[0, 2, 1]]), 0)
    assert abs(np.linalg.norm(n) - 1) < 1e-12
    np.testing.assert_array_equal(n2, -n)
    assert a == a2


def test_with_vertices_shape_checked(ico):
    with pytest.raises(MeshError):
        ico.with_vertices(np.zeros((3, 3)))
    assert mesh_sequence_topology_matches([ico, ico.with_vertices(ico.vertices * 2)])
    assert not mesh_sequence_topology_matches([ico, TriangleMesh(ico.vertices, ico.faces[::-1])])
