"""Triangle meshes: OBJ I/O, Loop subdivision and per-face geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

# faces with area below this are treated as degenerate (scene units^2)
DEGENERATE_AREA = 1e-12


class MeshError(ValueError):
    """Base class for mesh validation and parsing failures."""


class ObjParseError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    pass


class NonManifoldError(MeshError):
    pass


@dataclass(frozen=True)
class TriangleMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (N_v, 3) float array
    faces : (N_f, 3) int array of vertex indices, consistently wound.
    """

    vertices: np.ndarray
    faces: np.ndarray
    _edges: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise MeshError("face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new positions (one frame of a sequence)."""
        vertices = np.asarray(vertices, dtype=np.float64)
        if vertices.shape != self.vertices.shape:
            raise MeshError(f"vertex array shape {vertices.shape} does not match {self.vertices.shape}")
        return TriangleMesh(vertices, self.faces)

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and, for each face, the index of its three edges.

        Returns ``(edges, face_edges)`` where ``edges`` is (E, 2) sorted per row and
        ``face_edges[f, k]`` indexes the edge from corner k to corner (k + 1) % 3.
        """
        if "edges" not in self._edges:
            f = self.faces
            he = np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)
            key = np.sort(he, axis=1)
            uniq, inverse = np.unique(key, axis=0, return_inverse=True)
            self._edges["edges"] = (uniq, inverse.reshape(-1, 3))
        return self._edges["edges"]

    def edge_face_counts(self) -> np.ndarray:
        edges, fe = self.edges()
        return np.bincount(fe.ravel(), minlength=len(edges))

    def boundary_loops(self) -> int:
        """Number of closed boundary loops."""
        edges, _ = self.edges()
        bnd = edges[self.edge_face_counts() == 1]
        if len(bnd) == 0:
            return 0
        n = self.n_vertices
        g = sparse.coo_matrix((np.ones(len(bnd)), (bnd[:, 0], bnd[:, 1])), shape=(n, n))
        ncomp, labels = sparse.csgraph.connected_components(g, directed=False)
        return len(np.unique(labels[np.unique(bnd)]))

    def is_consistently_oriented(self) -> bool:
        """True when every directed half-edge appears at most once."""
        f = self.faces
        he = np.stack([f, np.roll(f, -1, axis=1)], axis=-1).reshape(-1, 2)
        return len(np.unique(he, axis=0)) == len(he)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges()[0]) + self.n_faces


def load_mesh(path) -> TriangleMesh:
    """Read an ASCII OBJ file holding ``v`` and triangular ``f`` records.

    Normals, texture coordinates and all other record types are ignored. Face
    indices are 1-based; negative (relative) indices are rejected.
    """
    verts = []
    faces = []
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "v":
                if len(tok) < 4:
                    raise ObjParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    verts.append([float(t) for t in tok[1:4]])
                except ValueError:
                    raise ObjParseError(f"{path}:{lineno}: malformed vertex line") from None
            elif tok[0] == "f":
                if len(tok) != 4:
                    raise ObjParseError(f"{path}:{lineno}: non-triangular face")
                idx = []
                for t in tok[1:]:
                    head = t.split("/", 1)[0]
                    try:
                        k = int(head)
                    except ValueError:
                        raise ObjParseError(f"{path}:{lineno}: malformed face index {t!r}") from None
                    if k <= 0:
                        raise ObjParseError(f"{path}:{lineno}: negative or zero face index {k}")
                    idx.append(k - 1)
                faces.append(idx)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        raise MeshError(f"{path}: face index {f.max() + 1} out of range (only {len(v)} vertices)")
    mesh = TriangleMesh(v, f)
    if not mesh.is_consistently_oriented():
        raise MeshError(f"{path}: inconsistent face winding")
    return mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def _loop_beta(n: int) -> float:
    return (5.0 / 8.0 - (3.0 / 8.0 + math.cos(2.0 * math.pi / n) / 4.0) ** 2) / n


def loop_operator(mesh: TriangleMesh) -> tuple[sparse.csr_matrix, np.ndarray]:
    """One step of Loop subdivision as a linear map on vertex positions.

    Returns ``(S, faces)`` with ``S`` of shape (N_v + E, N_v) such that the
    refined vertices are ``S @ mesh.vertices``. Even (old) vertices come first,
    followed by one odd vertex per unique edge in sorted-edge order.
    """
    edges, face_edges = mesh.edges()
    counts = mesh.edge_face_counts()
    if np.any(counts > 2):
        bad = edges[np.argmax(counts > 2)]
        raise NonManifoldError(f"non-manifold edge ({bad[0]}, {bad[1]}) shared by more than two faces")
    nv, ne = mesh.n_vertices, len(edges)
    f = mesh.faces

    rows, cols, vals = [], [], []

    # odd vertices
    opp = -np.ones((ne, 2), dtype=np.int64)
    slot = np.zeros(ne, dtype=np.int64)
    for k in range(3):
        e = face_edges[:, k]
        o = f[:, (k + 2) % 3]
        for ei, oi in zip(e, o):
            opp[ei, slot[ei]] = oi
            slot[ei] += 1
    interior = counts == 2
    for ei in range(ne):
        a, b = edges[ei]
        r = nv + ei
        if interior[ei]:
            rows += [r, r, r, r]
            cols += [a, b, opp[ei, 0], opp[ei, 1]]
            vals += [3 / 8, 3 / 8, 1 / 8, 1 / 8]
        else:
            rows += [r, r]
            cols += [a, b]
            vals += [0.5, 0.5]

    # even vertices
    nbrs = [set() for _ in range(nv)]
    bnd_nbrs = [[] for _ in range(nv)]
    for ei in range(ne):
        a, b = edges[ei]
        nbrs[a].add(b)
        nbrs[b].add(a)
        if not interior[ei]:
            bnd_nbrs[a].append(b)
            bnd_nbrs[b].append(a)
    for vi in range(nv):
        if bnd_nbrs[vi]:
            if len(bnd_nbrs[vi]) != 2:
                raise NonManifoldError(f"boundary vertex {vi} is not a manifold boundary vertex")
            rows += [vi, vi, vi]
            cols += [vi, bnd_nbrs[vi][0], bnd_nbrs[vi][1]]
            vals += [3 / 4, 1 / 8, 1 / 8]
        elif nbrs[vi]:
            n = len(nbrs[vi])
            beta = _loop_beta(n)
            rows.append(vi)
            cols.append(vi)
            vals.append(1.0 - n * beta)
            for u in sorted(nbrs[vi]):
                rows.append(vi)
                cols.append(u)
                vals.append(beta)
        else:
            rows.append(vi)
            cols.append(vi)
            vals.append(1.0)

    S = sparse.csr_matrix((vals, (rows, cols)), shape=(nv + ne, nv))

    m01 = nv + face_edges[:, 0]
    m12 = nv + face_edges[:, 1]
    m20 = nv + face_edges[:, 2]
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    new_faces = np.stack(
        [
            np.stack([a, m01, m20], 1),
            np.stack([b, m12, m01], 1),
            np.stack([c, m20, m12], 1),
            np.stack([m01, m12, m20], 1),
        ],
        axis=1,
    ).reshape(-1, 3)
    return S, new_faces


@dataclass(frozen=True)
class Subdivision:
    """Composite Loop operator reusable across frames sharing topology."""

    operator: sparse.csr_matrix
    faces: np.ndarray
    iterations: int

    def apply(self, vertices) -> TriangleMesh:
        return TriangleMesh(self.operator @ np.asarray(vertices, dtype=np.float64), self.faces)


def loop_subdivision(mesh: TriangleMesh, iterations: int) -> Subdivision:
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    op = sparse.identity(mesh.n_vertices, format="csr")
    cur = mesh
    for _ in range(iterations):
        S, faces = loop_operator(cur)
        op = (S @ op).tocsr()
        cur = TriangleMesh(S @ cur.vertices, faces)
    return Subdivision(op, cur.faces, iterations)


def loop_subdivide(mesh: TriangleMesh, iterations: int) -> TriangleMesh:
    """Apply ``iterations`` rounds of Loop subdivision (Loop 1987 stencils)."""
    if iterations == 0:
        return mesh
    return loop_subdivision(mesh, iterations).apply(mesh.vertices)


def face_planes(vertices: np.ndarray, faces: np.ndarray, check: bool = True):
    """Vectorised centroid, unit normal and area for every face."""
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    cr = np.cross(e1, e2)
    norm = np.linalg.norm(cr, axis=1)
    area = 0.5 * norm
    if check and np.any(area < DEGENERATE_AREA):
        bad = int(np.argmax(area < DEGENERATE_AREA))
        raise DegenerateFaceError(f"face {bad} is degenerate (area {area[bad]:.3g})")
    with np.errstate(invalid="ignore", divide="ignore"):
        normal = cr / norm[:, None]
    return tri.mean(axis=1), normal, area


def face_plane(mesh: TriangleMesh, face_id: int):
    """Return ``(centroid, unit_normal, area)`` of one face.

    The normal is ``normalize(e1 x e2)`` with ``e1 = B - A``, ``e2 = C - A`` and
    therefore follows the face winding.
    """
    if not 0 <= face_id < mesh.n_faces:
        raise IndexError(f"face id {face_id} out of range")
    c, n, a = face_planes(mesh.vertices, mesh.faces[face_id : face_id + 1])
    return c[0], n[0], float(a[0])


def icosahedron() -> TriangleMesh:
    """Unit-circumradius regular icosahedron with outward winding."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return TriangleMesh(v, f)


def mesh_sequence_topology_matches(meshes) -> bool:
    meshes = list(meshes)
    return all(np.array_equal(m.faces, meshes[0].faces) for m in meshes[1:])
