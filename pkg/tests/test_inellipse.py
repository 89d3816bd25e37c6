import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from surfelsplat.inellipse import (
    corner_tag_name,
    densify_layout,
    foci_complex,
    fractal_densify,
    inellipse_axes,
    register_face_surfel,
    register_mesh,
    register_triangles,
    steiner_foci,
    surfels_per_face,
)
from surfelsplat.mesh import DegenerateFaceError, TriangleMesh, loop_subdivide

coords = st.floats(-5, 5, allow_nan=False)
triangles = st.lists(coords, min_size=9, max_size=9).map(lambda xs: np.array(xs).reshape(3, 3))

AREA_RATIO = 1.0 / (3.0 * math.sqrt(3.0))


def area(tri):
    return 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))


def well_shaped(tri):
    # keep the relative-tolerance identities meaningful
    e = [np.linalg.norm(tri[i] - tri[(i + 1) % 3]) for i in range(3)]
    return area(tri) > 1e-3 * max(e) ** 2 and max(e) > 1e-3


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def test_axes_equilateral():
    s1, s2 = inellipse_axes(1, 1, 1)
    assert s1 == pytest.approx(1 / (2 * math.sqrt(3)), abs=1e-12)
    assert s2 == pytest.approx(1 / (2 * math.sqrt(3)), abs=1e-12)


def test_axes_collinear():
    s1, s2 = inellipse_axes(2, 1, 1)
    assert s1 == pytest.approx(1 / math.sqrt(3), abs=1e-12)
    assert s2 == 0.0


def test_axes_345():
    # direct evaluation with F = sqrt(193); the area identity is checked independently
    s1, s2 = inellipse_axes(3, 4, 5)
    assert s1 == pytest.approx(1.4699290230, abs=1e-9)
    assert s2 == pytest.approx(0.7855484995, abs=1e-9)
    assert math.pi * s1 * s2 == pytest.approx(math.pi * AREA_RATIO * 6.0, rel=1e-12)


def test_axes_reject_bad_lengths():
    with pytest.raises(ValueError):
        inellipse_axes(1, 1, 3)
    with pytest.raises(ValueError):
        inellipse_axes(-1, 1, 1)


def test_foci_right_isoceles_complex():
    zp, zm = foci_complex(0, 1, 1j)
    got = sorted([zp, zm], key=lambda z: z.imag)
    assert abs(got[0] - (0.5690355937 + 0.0976310729j)) < 1e-9
    assert abs(got[1] - (0.0976310729 + 0.5690355937j)) < 1e-9


def test_foci_are_roots_of_cubic_derivative(rng):
    for _ in range(20):
        A, B, C = rng.normal(size=3) + 1j * rng.normal(size=3)
        ref = np.roots(np.polyder(np.poly([A, B, C])))
        got = np.array(foci_complex(A, B, C))
        d = np.abs(got[:, None] - ref[None, :])
        assert d.min(axis=1).max() < 1e-9


def test_steiner_foci_tangent_plane():
    # in-plane basis has its origin at the centroid and u along AB
    zp, zm = steiner_foci([0, 0, 0], [1, 0, 0], [0, 1, 0])
    c = np.array([1 / 3, 1 / 3])
    got = sorted([tuple(zp + c), tuple(zm + c)], key=lambda p: p[1])
    np.testing.assert_allclose(got, [[0.5690355937, 0.0976310729], [0.0976310729, 0.5690355937]], atol=1e-9)


def test_foci_equilateral_coincide():
    h = math.sqrt(3) / 2
    zp, zm = steiner_foci([0, 0, 0], [1, 0, 0], [0.5, h, 0])
    # the focal offset is the square root of a round-off sized radicand
    np.testing.assert_allclose(zp, 0, atol=1e-7)
    np.testing.assert_allclose(zm, 0, atol=1e-7)


def test_foci_degenerate():
    with pytest.raises(DegenerateFaceError):
        steiner_foci([0, 0, 0], [1, 0, 0], [2, 0, 0])


@settings(max_examples=200, deadline=None)
@given(triangles)
def test_inellipse_identities(tri):
    assume(well_shaped(tri))
    fr = register_triangles(tri[None])[0]
    assert fr.s1 >= fr.s2 >= 0
    assert abs(np.linalg.norm(fr.t_u) - 1) < 1e-10
    assert abs(np.linalg.norm(fr.t_v) - 1) < 1e-10
    assert abs(fr.t_u @ fr.t_v) < 1e-10
    assert math.pi * fr.s1 * fr.s2 / area(tri) == pytest.approx(math.pi * AREA_RATIO, rel=1e-9)
    for i in range(3):
        mid = (tri[i] + tri[(i + 1) % 3]) / 2
        assert fr.quadratic_form(mid) == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(fr.centroid, tri.mean(0), atol=1e-12)
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    np.testing.assert_allclose(fr.normal, n / np.linalg.norm(n), atol=1e-10)


@settings(max_examples=200, deadline=None)
@given(triangles)
def test_foci_on_major_axis(tri):
    assume(well_shaped(tri))
    zp, zm = steiner_foci(*tri)
    fr = register_triangles(tri[None])[0]
    np.testing.assert_allclose((zp + zm) / 2, 0, atol=1e-9)
    d = zp - zm
    if np.linalg.norm(d) < 1e-6 * fr.s1:
        return
    # lift the focal direction back to 3D with the same tangent basis
    e1 = (tri[1] - tri[0]) / np.linalg.norm(tri[1] - tri[0])
    e2 = np.cross(fr.normal, e1)
    d3 = d[0] * e1 + d[1] * e2
    sin = np.linalg.norm(np.cross(d3 / np.linalg.norm(d3), fr.t_u))
    assert sin < 1e-8
    # focal half-distance of an ellipse is sqrt(s1^2 - s2^2)
    assert np.linalg.norm(d) / 2 == pytest.approx(math.sqrt(fr.s1 ** 2 - fr.s2 ** 2), rel=1e-7, abs=1e-12)


def test_right_isoceles_frame():
    m = TriangleMesh([[0, 0, 0], [3, 0, 0], [0, 3, 0]], [[0, 1, 2]])
    fr = register_face_surfel(m, 0)
    np.testing.assert_allclose(fr.centroid, [1, 1, 0], atol=1e-14)
    assert abs(abs(fr.t_u @ np.array([1, -1, 0]) / math.sqrt(2)) - 1) < 1e-12
    # sign convention: first nonzero in-plane component (along AB) positive
    assert fr.t_u @ np.array([1, 0, 0]) > 0


def test_equilateral_tie_break_uses_first_edge():
    h = math.sqrt(3) / 2
    fr = register_triangles(np.array([[[0, 0, 0], [1, 0, 0], [0.5, h, 0]]], dtype=float))[0]
    np.testing.assert_allclose(fr.t_u, [1, 0, 0], atol=1e-12)
    np.testing.assert_allclose(fr.t_v, [0, 1, 0], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(triangles, st.floats(0.1, 10))
def test_similarity_invariance(tri, k):
    assume(well_shaped(tri))
    a = register_triangles(tri[None])[0]
    b = register_triangles((k * tri)[None])[0]
    assert b.s1 == pytest.approx(k * a.s1, rel=1e-12)
    assert b.s2 == pytest.approx(k * a.s2, rel=1e-9, abs=1e-12)
    if a.s1 - a.s2 > 1e-6 * a.s1:
        assert abs(abs(a.t_u @ b.t_u) - 1) < 1e-9


@settings(max_examples=60, deadline=None)
@given(triangles, st.integers(0, 2 ** 32 - 1))
def test_rigid_invariance(tri, seed):
    assume(well_shaped(tri))
    R = random_rotation(np.random.default_rng(seed))
    t = np.array([0.3, -1.0, 2.0])
    a = register_triangles(tri[None])[0]
    b = register_triangles((tri @ R.T + t)[None])[0]
    assert abs(b.s1 - a.s1) < 1e-10 and abs(b.s2 - a.s2) < 1e-10
    np.testing.assert_allclose(b.centroid, R @ a.centroid + t, atol=1e-10)
    if a.s1 - a.s2 > 1e-4 * a.s1:
        # the sign convention is tied to edge AB, which rotates with the triangle
        np.testing.assert_allclose(b.t_u, R @ a.t_u, atol=1e-8)
        np.testing.assert_allclose(b.t_v, R @ a.t_v, atol=1e-8)


def test_fractal_count_and_order(ico):
    m = loop_subdivide(ico, 1)
    out = fractal_densify(m)
    assert len(out) == 4 * m.n_faces
    assert [fid for _, fid, _ in out[:8]] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert [corner_tag_name(t) for _, _, t in out[:4]] == ["center", "cornerA", "cornerB", "cornerC"]


def test_fractal_corner_geometry():
    h = math.sqrt(3) / 2
    v = np.array([[0, 0, 0], [1, 0, 0], [0.5, h, 0]], dtype=float)
    out = fractal_densify(TriangleMesh(v, [[0, 1, 2]]))
    parent = out[0][0]
    for k, (fr, _, tag) in enumerate(out[1:]):
        assert fr.s1 == pytest.approx(0.5 * parent.s1, abs=1e-12)
        vA = v[k]
        mids = [(vA + v[j]) / 2 for j in range(3) if j != k]
        np.testing.assert_allclose(fr.centroid, (vA + mids[0] + mids[1]) / 3, atol=1e-14)


def test_densify_depth_config(ico):
    assert surfels_per_face(0) == 1 and surfels_per_face(1) == 4 and surfels_per_face(2) == 13
    lay = densify_layout(ico.n_faces, 2)
    fr = register_mesh(ico.vertices, ico.faces, depth=2)
    assert len(fr) == len(lay.face_id) == 13 * ico.n_faces
    assert len(register_mesh(ico.vertices, ico.faces, depth=0)) == ico.n_faces


def test_registration_is_batch_consistent(ico):
    fr = register_mesh(ico.vertices, ico.faces, depth=1)
    lay = densify_layout(ico.n_faces, 1)
    for i in np.flatnonzero(lay.corner_tag == 0)[:5]:
        single = register_face_surfel(ico, int(lay.face_id[i]))
        np.testing.assert_allclose(fr.t_u[i], single.t_u, atol=1e-15)
        np.testing.assert_allclose(fr.scale[i], [single.s1, single.s2], atol=1e-15)
