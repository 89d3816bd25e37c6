"""Surfel attribute storage, residual deformation and the MSRF scene file."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inellipse import FrameArrays
from .sh import C0, N_COEFFS

INIT_OPACITY = 0.9
INIT_DC = 0.5 / C0  # mid-gray

SCENE_MAGIC = b"MSRF"
SCENE_VERSION = 1

# (name, per-surfel width) in on-disk order
SCENE_FIELDS = (
    ("centroid", 3),
    ("t_u", 3),
    ("t_v", 3),
    ("scale", 2),
    ("delta_p", 3),
    ("delta_s", 2),
    ("delta_r", 3),
    ("opacity", 1),
    ("mask", 1),
    ("sh", 48),
    ("face_id", 1),
    ("corner_tag", 1),
)


@dataclass
class Residuals:
    """Per-surfel residual updates; ``delta_p`` lives in the local (t_u, t_v, n) frame."""

    delta_p: np.ndarray
    delta_s: np.ndarray
    delta_r: np.ndarray
    mask: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "Residuals":
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 3)), np.ones(n))

    def __len__(self):
        return len(self.delta_p)


@dataclass
class Surfels:
    """Renderable (deformed) surfel attributes."""

    centroid: np.ndarray  # (N, 3)
    t_u: np.ndarray  # (N, 3)
    t_v: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 2)
    opacity: np.ndarray  # (N,)
    sh: np.ndarray  # (N, 16, 3)

    def __len__(self):
        return len(self.centroid)

    @property
    def normal(self):
        return np.cross(self.t_u, self.t_v)

    @classmethod
    def empty(cls) -> "Surfels":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 2)), np.zeros(0), np.zeros((0, N_COEFFS, 3)))


@dataclass
class SurfelScene:
    """All surfels of a scene: attached frames, residuals, appearance and provenance."""

    base: FrameArrays
    residuals: Residuals
    opacity: np.ndarray
    sh: np.ndarray
    face_id: np.ndarray
    corner_tag: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.face_id)

    def deformed(self) -> Surfels:
        return apply_deformation(self.base, self.residuals, self.opacity, self.sh)

    def attached(self) -> Surfels:
        return apply_deformation(self.base, Residuals.zeros(len(self)), self.opacity, self.sh)

    def copy(self) -> "SurfelScene":
        return SurfelScene(
            FrameArrays(*(a.copy() for a in (self.base.centroid, self.base.t_u, self.base.t_v, self.base.scale))),
            Residuals(*(a.copy() for a in (self.residuals.delta_p, self.residuals.delta_s, self.residuals.delta_r, self.residuals.mask))),
            self.opacity.copy(),
            self.sh.copy(),
            self.face_id.copy(),
            self.corner_tag.copy(),
            json.loads(json.dumps(self.meta)),
        )

    def field_arrays(self) -> dict:
        n = len(self)
        return {
            "centroid": self.base.centroid,
            "t_u": self.base.t_u,
            "t_v": self.base.t_v,
            "scale": self.base.scale,
            "delta_p": self.residuals.delta_p,
            "delta_s": self.residuals.delta_s,
            "delta_r": self.residuals.delta_r,
            "opacity": self.opacity.reshape(n, 1),
            "mask": self.residuals.mask.reshape(n, 1),
            "sh": self.sh.reshape(n, 48),
            "face_id": self.face_id.reshape(n, 1),
            "corner_tag": self.corner_tag.reshape(n, 1),
        }


def init_scene(frames: FrameArrays, face_id, corner_tag=None, meta=None) -> SurfelScene:
    """Fresh scene: zero residuals, opacity 0.9, mid-gray DC color, higher bands zero."""
    n = len(frames)
    if n == 0:
        raise ValueError("cannot initialise a scene from an empty frame list")
    face_id = np.asarray(face_id, dtype=np.int64)
    if len(face_id) != n:
        raise ValueError("face_id length does not match frame count")
    corner_tag = np.zeros(n, dtype=np.int64) if corner_tag is None else np.asarray(corner_tag, dtype=np.int64)
    sh = np.zeros((n, N_COEFFS, 3))
    sh[:, 0, :] = INIT_DC
    # stored attributes are float32 so that the scene file round-trips exactly
    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    base = FrameArrays(f32(frames.centroid), f32(frames.t_u), f32(frames.t_v), f32(frames.scale))
    return SurfelScene(
        base=base,
        residuals=Residuals.zeros(n),
        opacity=f32(np.full(n, INIT_OPACITY)),
        sh=f32(sh),
        face_id=face_id,
        corner_tag=corner_tag,
        meta=dict(meta or {}),
    )


# ---------------------------------------------------------------------------
# residual deformation


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([o, z, z], -1), np.stack([z, c, -s], -1), np.stack([z, s, c], -1)], -2)


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, z, s], -1), np.stack([z, o, z], -1), np.stack([-s, z, c], -1)], -2)


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    o, z = np.ones_like(a), np.zeros_like(a)
    return np.stack([np.stack([c, -s, z], -1), np.stack([s, c, z], -1), np.stack([z, z, o], -1)], -2)


def _d_rot_x(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([z, z, z], -1), np.stack([z, -s, -c], -1), np.stack([z, c, -s], -1)], -2)


def _d_rot_y(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([-s, z, c], -1), np.stack([z, z, z], -1), np.stack([-c, z, -s], -1)], -2)


def _d_rot_z(a):
    c, s = np.cos(a), np.sin(a)
    z = np.zeros_like(a)
    return np.stack([np.stack([-s, -c, z], -1), np.stack([c, -s, z], -1), np.stack([z, z, z], -1)], -2)


def local_rotation(delta_r):
    """Rotation in the local frame: tilt about t_u, tilt about t_v, then spin about n.

    ``delta_r = (spin, tilt_u, tilt_v)`` in radians.
    """
    spin, tu, tv = delta_r[..., 0], delta_r[..., 1], delta_r[..., 2]
    return _rot_x(tu) @ _rot_y(tv) @ _rot_z(spin)


def _frame_matrix(base: FrameArrays):
    return np.stack([base.t_u, base.t_v, base.normal], axis=-1)  # columns


def apply_deformation(base: FrameArrays, res: Residuals, opacity, sh) -> Surfels:
    """Deformed surfels: p' = p + F dp, s' = max(s + ds, 0), r' = F Q(dr), a' = a * M."""
    n = len(base)
    if len(res) != n or len(opacity) != n:
        raise ValueError(f"residual count {len(res)} does not match surfel count {n}")
    mask = np.asarray(res.mask, dtype=np.float64)
    if np.any((mask < 0) | (mask > 1)):
        raise ValueError("opacity mask must lie in [0, 1]")
    F = _frame_matrix(base)
    p = base.centroid + np.einsum("nij,nj->ni", F, res.delta_p)
    s = np.maximum(base.scale + res.delta_s, 0.0)
    R = F @ local_rotation(res.delta_r)
    return Surfels(p, R[..., 0], R[..., 1], s, np.asarray(opacity) * mask, np.asarray(sh, dtype=np.float64))


def deformation_backward(base: FrameArrays, res: Residuals, opacity, g: Surfels):
    """Pull gradients on deformed attributes back to residuals and base opacity.

    Returns a dict with ``delta_p, delta_s, delta_r, mask, opacity``.
    """
    F = _frame_matrix(base)
    g_dp = np.einsum("nij,ni->nj", F, g.centroid)
    g_ds = g.scale * ((base.scale + res.delta_s) > 0.0)
    spin, tu, tv = res.delta_r[:, 0], res.delta_r[:, 1], res.delta_r[:, 2]
    Rx, Ry, Rz = _rot_x(tu), _rot_y(tv), _rot_z(spin)
    # dL/dQ: columns 0, 1 of Q map to t_u', t_v'
    gQ = np.zeros((len(base), 3, 3))
    gQ[:, :, 0] = np.einsum("nij,ni->nj", F, g.t_u)
    gQ[:, :, 1] = np.einsum("nij,ni->nj", F, g.t_v)
    d_spin = np.sum(gQ * (Rx @ Ry @ _d_rot_z(spin)), axis=(1, 2))
    d_tu = np.sum(gQ * (_d_rot_x(tu) @ Ry @ Rz), axis=(1, 2))
    d_tv = np.sum(gQ * (Rx @ _d_rot_y(tv) @ Rz), axis=(1, 2))
    g_dr = np.stack([d_spin, d_tu, d_tv], axis=-1)
    return {
        "delta_p": g_dp,
        "delta_s": g_ds,
        "delta_r": g_dr,
        "mask": g.opacity * np.asarray(opacity),
        "opacity": g.opacity * res.mask,
    }



# ---------------------------------------------------------------------------
# serialisation


def save_scene(scene: SurfelScene, path) -> Path:
    """Write ``path`` (binary MSRF) and ``path.json`` (metadata sidecar)."""
    path = Path(path)
    arrays = scene.field_arrays()
    n = len(scene)
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<IQ", SCENE_VERSION, n))
        for name, width in SCENE_FIELDS:
            a = np.asarray(arrays[name], dtype="<f4").reshape(n, width)
            fh.write(a.tobytes(order="C"))
    sidecar = {
        "format": "MSRF",
        "version": SCENE_VERSION,
        "count": n,
        "dtype": "float32-le",
        "fields": [{"name": nm, "width": w} for nm, w in SCENE_FIELDS],
        "meta": scene.meta,
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def load_scene(path) -> SurfelScene:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != SCENE_MAGIC:
        raise ValueError(f"{path}: not an MSRF scene file")
    version, n = struct.unpack_from("<IQ", raw, 4)
    if version != SCENE_VERSION:
        raise ValueError(f"{path}: unsupported scene version {version}")
    off = 16
    arrays = {}
    for name, width in SCENE_FIELDS:
        cnt = n * width
        a = np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).reshape(n, width)
        arrays[name] = a.astype(np.float64)
        off += 4 * cnt
    if off != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    side = Path(str(path) + ".json")
    meta = json.loads(side.read_text()).get("meta", {}) if side.exists() else {}
    return SurfelScene(
        base=FrameArrays(arrays["centroid"], arrays["t_u"], arrays["t_v"], arrays["scale"]),
        residuals=Residuals(arrays["delta_p"], arrays["delta_s"], arrays["delta_r"], arrays["mask"][:, 0]),
        opacity=arrays["opacity"][:, 0],
        sh=arrays["sh"].reshape(n, N_COEFFS, 3),
        face_id=arrays["face_id"][:, 0].astype(np.int64),
        corner_tag=arrays["corner_tag"][:, 0].astype(np.int64),
        meta=meta,
    )


def quantize(scene: SurfelScene) -> SurfelScene:
    """Round every float attribute to float32, as stored on disk."""
    s = scene.copy()
    for arr in (s.base.centroid, s.base.t_u, s.base.t_v, s.base.scale, s.residuals.delta_p, s.residuals.delta_s,
                s.residuals.delta_r, s.residuals.mask, s.opacity, s.sh):
        arr[...] = arr.astype(np.float32)
    return s
