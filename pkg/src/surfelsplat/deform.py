"""Surfel deformation network: hashgrid + face embedding -> MLP encoder -> residual decoder.

Everything is plain numpy with a hand-written reverse pass. Parameters live in
a flat ``dict[str, ndarray]`` so the optimizer and checkpoint code can treat
them uniformly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene import Residuals

PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))
OUT_DIM = 9  # 3 dp + 2 ds + 3 dr + 1 mask logit
DP_SCALE = 0.01
DS_SCALE = 0.01
DR_SCALE = 0.1
CKPT_MAGIC = b"MDNP"
CKPT_VERSION = 1
LAYERS = ("enc0", "enc1", "dec0", "dec1")
MASK_ROW = 8


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 12
    table_size: int = 2 ** 15
    features: int = 2
    base_resolution: int = 16
    growth: float = 1.38

    def __post_init__(self):
        if self.levels < 1 or self.table_size < 1 or self.features < 1 or self.base_resolution < 1:
            raise ValueError("hashgrid sizes must be positive")

    def resolutions(self) -> list[int]:
        return [int(np.floor(self.base_resolution * self.growth ** l)) for l in range(self.levels)]

    @property
    def out_dim(self) -> int:
        return self.levels * self.features


@dataclass(frozen=True)
class NetConfig:
    grid: HashGridConfig = field(default_factory=HashGridConfig)
    embed_dim: int = 8
    hidden: int = 64
    theta_dim: int = 45
    beta_dim: int = 10

    @property
    def in_dim(self) -> int:
        return self.grid.out_dim + self.embed_dim + self.theta_dim + self.beta_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        grid = HashGridConfig(**d.pop("grid", {}))
        return cls(grid=grid, **d)


@dataclass
class SceneBox:
    """Affine map from world points to the unit cube used by the hashgrid."""

    lo: np.ndarray
    size: float

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        if not self.size > 0:
            raise ValueError("scene box size must be positive")

    def normalize(self, p):
        return (np.asarray(p) - self.lo) / self.size

    @classmethod
    def around(cls, points, pad: float = 0.1) -> "SceneBox":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = pts.min(0), pts.max(0)
        size = float((hi - lo).max()) * (1 + 2 * pad)
        center = 0.5 * (lo + hi)
        return cls(center - 0.5 * size, size)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "size": self.size}

    @classmethod
    def from_dict(cls, d) -> "SceneBox":
        return cls(d["lo"], float(d["size"]))


# ---------------------------------------------------------------------------
# hashgrid


def _level_lookup(p01, res, table_size):
    """Corner table indices (n, 8), trilinear weights (n, 8), weight derivatives (n, 8, 3)."""
    x = p01 * res
    i0 = np.clip(np.floor(x), 0, res - 1).astype(np.int64)
    w = x - i0
    dense = (res + 1) ** 3 <= table_size
    idx = np.empty((len(p01), 8), np.int64)
    wt = np.empty((len(p01), 8))
    dwt = np.empty((len(p01), 8, 3))
    for c in range(8):
        off = np.array([(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1])
        corner = i0 + off
        if dense:
            idx[:, c] = corner[:, 0] + (res + 1) * (corner[:, 1] + (res + 1) * corner[:, 2])
        else:
            cu = corner.astype(np.uint64)
            h = (cu[:, 0] * PRIMES[0]) ^ (cu[:, 1] * PRIMES[1]) ^ (cu[:, 2] * PRIMES[2])
            idx[:, c] = (h % np.uint64(table_size)).astype(np.int64)
        f = np.where(off == 1, w, 1.0 - w)  # per-axis factors
        sgn = np.where(off == 1, 1.0, -1.0)
        wt[:, c] = f[:, 0] * f[:, 1] * f[:, 2]
        dwt[:, c, 0] = sgn[0] * f[:, 1] * f[:, 2] * res
        dwt[:, c, 1] = sgn[1] * f[:, 0] * f[:, 2] * res
        dwt[:, c, 2] = sgn[2] * f[:, 0] * f[:, 1] * res
    return idx, wt, dwt


def hashgrid_encode(p01, table, cfg: HashGridConfig, return_cache=False):
    """Multiresolution hash encoding of points in the unit cube (clamped).

    ``table`` has shape ``(levels, table_size, features)``. Returns ``(n, levels * features)``.
    """
    p = np.asarray(p01, dtype=np.float64).reshape(-1, 3)
    inside = (p >= 0.0) & (p <= 1.0)
    p = np.clip(p, 0.0, 1.0)
    out = np.empty((len(p), cfg.levels, cfg.features))
    cache = []
    for l, res in enumerate(cfg.resolutions()):
        idx, wt, dwt = _level_lookup(p, res, cfg.table_size)
        out[:, l, :] = np.einsum("nc,ncf->nf", wt, table[l][idx])
        cache.append((idx, wt, dwt))
    out = out.reshape(len(p), -1)
    if return_cache:
        return out, dict(levels=cache, inside=inside)
    return out


def hashgrid_backward(grad_out, table, cfg: HashGridConfig, cache, need_position=True):
    """Gradients w.r.t. the table (summed over colliding cells) and the unit-cube point."""
    n = grad_out.shape[0]
    g = grad_out.reshape(n, cfg.levels, cfg.features)
    g_table = np.zeros_like(table)
    g_p = np.zeros((n, 3))
    for l, (idx, wt, dwt) in enumerate(cache["levels"]):
        flat = idx.ravel()
        for f in range(cfg.features):
            contrib = (wt * g[:, l, f][:, None]).ravel()
            g_table[l, :, f] += np.bincount(flat, weights=contrib, minlength=cfg.table_size)
        if need_position:
            feat = table[l][idx]  # (n, 8, F)
            gf = np.einsum("ncf,nf->nc", feat, g[:, l, :])
            g_p += np.einsum("nc,nca->na", gf, dwt)
    g_p *= cache["inside"]
    return g_table, g_p


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg: NetConfig, n_faces: int, rng: np.random.Generator) -> dict:
    g = cfg.grid
    params = {
        "hashgrid": rng.uniform(-1e-4, 1e-4, size=(g.levels, g.table_size, g.features)),
        "face_embed": rng.normal(0.0, 0.01, size=(n_faces, cfg.embed_dim)),
    }
    dims = [(cfg.in_dim, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, OUT_DIM)]
    for name, (fan_in, fan_out) in zip(LAYERS, dims):
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}_w"] = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        params[f"{name}_b"] = np.zeros(fan_out)
    params["dec1_w"][:] = 0.0
    return params


def param_group(name: str) -> str:
    return "hashgrid" if name == "hashgrid" else "net"


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class DeformCache:
    face_id: np.ndarray
    grid: dict
    x0: np.ndarray
    h: list
    pre: list
    raw: np.ndarray


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def deform_forward(params: dict, cfg: NetConfig, positions, face_id, theta, beta, box: SceneBox):
    """Residuals for every surfel. Returns ``(Residuals, DeformCache)``."""
    theta = np.asarray(theta, dtype=np.float64).ravel()
    beta = np.asarray(beta, dtype=np.float64).ravel()
    if theta.size != cfg.theta_dim or beta.size != cfg.beta_dim:
        raise ValueError(f"conditioning sizes ({theta.size}, {beta.size}) do not match ({cfg.theta_dim}, {cfg.beta_dim})")
    face_id = np.asarray(face_id, dtype=np.int64)
    n_faces = params["face_embed"].shape[0]
    if face_id.size and (face_id.min() < 0 or face_id.max() >= n_faces):
        raise IndexError(f"face id out of range for an embedding of {n_faces} faces")
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    f_h, gcache = hashgrid_encode(box.normalize(positions), params["hashgrid"], cfg.grid, return_cache=True)
    cond = np.broadcast_to(np.concatenate([theta, beta]), (n, theta.size + beta.size))
    x = np.concatenate([f_h, params["face_embed"][face_id], cond], axis=1)
    hs, pres = [x], []
    for name in LAYERS:
        z = hs[-1] @ params[f"{name}_w"].T + params[f"{name}_b"]
        pres.append(z)
        hs.append(np.maximum(z, 0.0) if name != "dec1" else z)
    raw = hs[-1]
    res = Residuals(
        delta_p=DP_SCALE * raw[:, 0:3],
        delta_s=DS_SCALE * raw[:, 3:5],
        delta_r=DR_SCALE * raw[:, 5:8],
        mask=_sigmoid(raw[:, MASK_ROW]),
    )
    return res, DeformCache(face_id, gcache, x, hs, pres, raw)


def deform_backward(params: dict, cfg: NetConfig, cache: DeformCache | None, grads: dict, box: SceneBox | None = None,
                    need_position: bool = False):
    """Reverse pass. ``grads`` holds upstream gradients on ``delta_p, delta_s, delta_r, mask``.

    Returns ``(param_grads, grad_positions)``; positions are only differentiated
    when ``need_position`` is set (they need ``box``).
    """
    if cache is None:
        raise ValueError("deform_backward needs the cache of a forward pass")
    n = cache.raw.shape[0]
    g_raw = np.zeros((n, OUT_DIM))
    for key, sl, scale in (("delta_p", slice(0, 3), DP_SCALE), ("delta_s", slice(3, 5), DS_SCALE),
                           ("delta_r", slice(5, 8), DR_SCALE)):
        if grads.get(key) is not None:
            g_raw[:, sl] = scale * np.asarray(grads[key]).reshape(n, -1)
    if grads.get("mask") is not None:
        s = _sigmoid(cache.raw[:, MASK_ROW])
        g_raw[:, MASK_ROW] = np.asarray(grads["mask"]).reshape(n) * s * (1.0 - s)
    out = {}
    g = g_raw
    for k in range(len(LAYERS) - 1, -1, -1):
        name = LAYERS[k]
        if name != "dec1":
            g = g * (cache.pre[k] > 0.0)
        out[f"{name}_w"] = g.T @ cache.h[k]
        out[f"{name}_b"] = g.sum(0)
        g = g @ params[f"{name}_w"]
    gdim = cfg.grid.out_dim
    g_fh = g[:, :gdim]
    g_emb = g[:, gdim:gdim + cfg.embed_dim]
    out["face_embed"] = np.zeros_like(params["face_embed"])
    np.add.at(out["face_embed"], cache.face_id, g_emb)
    out["hashgrid"], g_p01 = hashgrid_backward(g_fh, params["hashgrid"], cfg.grid, cache.grid, need_position)
    g_pos = None
    if need_position:
        if box is None:
            raise ValueError("position gradients need the scene box")
        g_pos = g_p01 / box.size
    return out, g_pos


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: dict, cfg: NetConfig, path, extra: dict | None = None) -> Path:
    """Binary container: magic, version, JSON header length + header, then float32 arrays."""
    path = Path(path)
    names = sorted(params)
    header = {
        "config": cfg.to_dict(),
        "arrays": [{"name": k, "shape": list(params[k].shape)} for k in names],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
    buf.write(blob)
    for k in names:
        buf.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path):
    """Returns ``(params, NetConfig, extra)``; arrays come back as float64."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a deformation-net checkpoint")
    version, hlen = struct.unpack_from("<IQ", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    header = json.loads(data[off:off + hlen])
    off += hlen
    params = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off)
        params[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
        off += 4 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return params, NetConfig.from_dict(header["config"]), header.get("extra", {})
