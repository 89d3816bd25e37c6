"""Steiner-inellipse surfel registration and fractal densification.

Each triangle is replaced by the unique ellipse tangent to its three edges at
their midpoints. The semi-axes come from the edge lengths; the axis directions
come from the eigenvectors of the 2x2 covariance of the vertices expressed in
the face tangent plane. The complex-focus construction (foci are the roots of
the derivative of the vertex cubic) is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import DEGENERATE_AREA, DegenerateFaceError, TriangleMesh

CORNER_TAGS = {0: "center", 1: "cornerA", 2: "cornerB", 3: "cornerC"}


@dataclass(frozen=True)
class SteinerFrame:
    centroid: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    s1: float
    s2: float

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.t_u, self.t_v)

    def quadratic_form(self, x) -> float:
        """Value of the ellipse equation at point ``x`` (1 on the boundary)."""
        d = np.asarray(x, dtype=np.float64) - self.centroid
        return float((d @ self.t_u / self.s1) ** 2 + (d @ self.t_v / self.s2) ** 2)


@dataclass
class FrameArrays:
    """Struct-of-arrays version of :class:`SteinerFrame` for many surfels."""

    centroid: np.ndarray  # (N, 3)
    t_u: np.ndarray  # (N, 3)
    t_v: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 2)

    def __len__(self):
        return len(self.centroid)

    @property
    def normal(self) -> np.ndarray:
        return np.cross(self.t_u, self.t_v)

    def __getitem__(self, i) -> SteinerFrame:
        return SteinerFrame(self.centroid[i], self.t_u[i], self.t_v[i], float(self.scale[i, 0]), float(self.scale[i, 1]))


def inellipse_axes(a: float, b: float, c: float) -> tuple[float, float]:
    """Semi-axes ``(s1, s2)`` of the Steiner inellipse from edge lengths."""
    s1, s2 = inellipse_axes_batch(np.array([[a, b, c]], dtype=np.float64))[0]
    return float(s1), float(s2)


def inellipse_axes_batch(lengths: np.ndarray) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.float64)
    a, b, c = lengths[..., 0], lengths[..., 1], lengths[..., 2]
    if np.any(lengths < 0):
        raise ValueError("edge lengths must be non-negative")
    tol = 1e-12 * np.maximum(np.max(lengths, axis=-1), 1.0)
    if np.any((a > b + c + tol) | (b > a + c + tol) | (c > a + b + tol)):
        raise ValueError("edge lengths violate the triangle inequality")
    a2, b2, c2 = a * a, b * b, c * c
    # a^4+b^4+c^4-a^2b^2-b^2c^2-c^2a^2 written as a sum of squares; the expanded
    # form cancels catastrophically on near-equilateral triangles
    F = np.sqrt(0.5 * ((a2 - b2) ** 2 + (b2 - c2) ** 2 + (c2 - a2) ** 2))
    q = a2 + b2 + c2
    s1 = np.sqrt(np.maximum(q + 2 * F, 0.0)) / 6.0
    s2 = np.sqrt(np.maximum(q - 2 * F, 0.0)) / 6.0
    return np.stack([s1, s2], axis=-1)


def foci_complex(A: complex, B: complex, C: complex) -> tuple[complex, complex]:
    """Foci of the Steiner inellipse of the triangle with complex vertices A, B, C."""
    root = np.sqrt(complex(A * A + B * B + C * C - B * C - C * A - A * B))
    s = A + B + C
    return (s + root) / 3.0, (s - root) / 3.0


def _tangent_basis(tri: np.ndarray):
    """Centroid, in-plane basis (e1 along AB, e2 = n x e1) and unit normal."""
    vA, vB, vC = tri[..., 0, :], tri[..., 1, :], tri[..., 2, :]
    centroid = (vA + vB + vC) / 3.0
    ab = vB - vA
    cr = np.cross(ab, vC - vA)
    area = 0.5 * np.linalg.norm(cr, axis=-1)
    if np.any(area < DEGENERATE_AREA):
        bad = int(np.argmax(np.atleast_1d(area < DEGENERATE_AREA)))
        raise DegenerateFaceError(f"degenerate triangle (index {bad}, area {np.atleast_1d(area)[bad]:.3g})")
    n = cr / (2.0 * area[..., None])
    e1 = ab / np.linalg.norm(ab, axis=-1, keepdims=True)
    e2 = np.cross(n, e1)
    return centroid, e1, e2, n, area


def steiner_foci(vA, vB, vC) -> tuple[np.ndarray, np.ndarray]:
    """Foci in the face tangent plane (origin at the centroid, u-axis along AB).

    Both roots are returned as 2D points ``(Z_plus, Z_minus)``.
    """
    tri = np.array([vA, vB, vC], dtype=np.float64)
    centroid, e1, e2, _, _ = _tangent_basis(tri)
    rel = tri - centroid
    z = rel @ e1 + 1j * (rel @ e2)
    zp, zm = foci_complex(*z)
    return np.array([zp.real, zp.imag]), np.array([zm.real, zm.imag])


def register_triangles(tri: np.ndarray) -> FrameArrays:
    """Register one surfel per triangle; ``tri`` has shape (N, 3, 3)."""
    tri = np.asarray(tri, dtype=np.float64)
    centroid, e1, e2, n, _ = _tangent_basis(tri)
    rel = tri - centroid[:, None, :]
    x = np.einsum("nkj,nj->nk", rel, e1)
    y = np.einsum("nkj,nj->nk", rel, e2)
    cxx = (x * x).mean(axis=1)
    cyy = (y * y).mean(axis=1)
    cxy = (x * y).mean(axis=1)
    # major-axis angle of the symmetric 2x2 covariance; atan2(0, 0) = 0 puts
    # isotropic (tied) covariances on the AB edge direction.
    diff = cxx - cyy
    tie = np.hypot(diff, 2 * cxy) <= 1e-12 * (cxx + cyy)
    theta = 0.5 * np.arctan2(np.where(tie, 0.0, 2 * cxy), np.where(tie, 0.0, diff))
    cu, su = np.cos(theta), np.sin(theta)
    # theta in (-pi/2, pi/2] so cu >= 0; at theta = pi/2 the second component is positive
    t_u = cu[:, None] * e1 + su[:, None] * e2
    t_v = np.cross(n, t_u)

    lengths = np.stack(
        [
            np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1),
            np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1),
            np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1),
        ],
        axis=1,
    )
    scale = inellipse_axes_batch(lengths)
    return FrameArrays(centroid, t_u, t_v, scale)


def register_face_surfel(mesh: TriangleMesh, face_id: int) -> SteinerFrame:
    if not 0 <= face_id < mesh.n_faces:
        raise IndexError(f"face id {face_id} out of range")
    return register_triangles(mesh.vertices[mesh.faces[face_id]][None])[0]


def _fractal_triangles(tri: np.ndarray, depth: int):
    """Yield (triangles, tag) for the Sierpinski pattern, ordered center first.

    Tags encode the corner path in base 4 with digits 1..3 (A, B, C); 0 is the
    face's own inellipse.
    """
    out = [(tri, 0)]
    if depth <= 0:
        return out
    A, B, C = tri[:, 0], tri[:, 1], tri[:, 2]
    mAB, mBC, mCA = (A + B) / 2, (B + C) / 2, (C + A) / 2
    corners = [
        np.stack([A, mAB, mCA], axis=1),
        np.stack([mAB, B, mBC], axis=1),
        np.stack([mCA, mBC, C], axis=1),
    ]
    for digit, sub in enumerate(corners, 1):
        for t, tag in _fractal_triangles(sub, depth - 1):
            out.append((t, digit + 4 * tag))
    return out


def surfels_per_face(depth: int) -> int:
    return 1 if depth <= 0 else 1 + 3 * surfels_per_face(depth - 1)


@dataclass(frozen=True)
class DensifyLayout:
    """How surfels map back to mesh faces; independent of vertex positions."""

    face_id: np.ndarray  # (N,)
    corner_tag: np.ndarray  # (N,)
    depth: int


def densify_layout(n_faces: int, depth: int) -> DensifyLayout:
    k = surfels_per_face(depth)
    dummy = np.zeros((1, 3, 3))
    tags = np.array([tag for _, tag in _fractal_triangles(dummy, depth)], dtype=np.int64)
    return DensifyLayout(np.repeat(np.arange(n_faces), k), np.tile(tags, n_faces), depth)


def register_mesh(vertices: np.ndarray, faces: np.ndarray, depth: int = 1) -> FrameArrays:
    """Surfel frames for every face and fractal corner, ordered by (face, tag).

    ``depth=1`` gives the center surfel plus the three corner surfels of each
    face; ``depth=0`` disables fractal densification.
    """
    tri = np.asarray(vertices, dtype=np.float64)[faces]
    parts = _fractal_triangles(tri, depth)
    frames = [register_triangles(t) for t, _ in parts]
    k = len(parts)
    n = len(faces)

    def interleave(name):
        arr = np.stack([getattr(f, name) for f in frames], axis=1)
        return arr.reshape(n * k, -1)

    return FrameArrays(interleave("centroid"), interleave("t_u"), interleave("t_v"), interleave("scale"))


def fractal_densify(mesh: TriangleMesh, depth: int = 1):
    """List of ``(SteinerFrame, face_id, corner_tag)``; 4 per face at depth 1."""
    frames = register_mesh(mesh.vertices, mesh.faces, depth)
    layout = densify_layout(mesh.n_faces, depth)
    return [(frames[i], int(layout.face_id[i]), int(layout.corner_tag[i])) for i in range(len(frames))]


def corner_tag_name(tag: int) -> str:
    if tag in CORNER_TAGS:
        return CORNER_TAGS[tag]
    digits = []
    while tag:
        digits.append("ABC"[tag % 4 - 1])
        tag //= 4
    return "corner" + "".join(digits)
