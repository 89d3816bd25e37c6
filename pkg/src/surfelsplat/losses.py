"""Training losses. Each returns the scalar value together with its gradients."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .metrics import ssim_with_grad
from .render import RenderBuffers, SurfelGrads
from .scene import Surfels

LAMBDA_SSIM = 0.2
LOSS_NAMES = ("depth", "normal", "color", "silhouette", "binding")


@dataclass
class LossWeights:
    lambda_c: float = 1.0
    lambda_n: float = 0.02
    lambda_d: float = 1000.0
    lambda_sil: float = 1.0
    lambda_b: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in asdict(self).values()):
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict:
        return {
            "depth": self.lambda_d,
            "normal": self.lambda_n,
            "color": self.lambda_c,
            "silhouette": self.lambda_sil,
            "binding": self.lambda_b,
        }

    def scaled(self, k: float) -> "LossWeights":
        return LossWeights(*(k * v for v in asdict(self).values()))


@dataclass
class BindingConfig:
    delta: float = 0.005

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("binding cutoff must be positive")


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def loss_color(rendered, target, lambda_ssim: float = LAMBDA_SSIM):
    """``(1 - l) * L1 + l * (1 - SSIM)``; returns ``(value, grad_rendered)``."""
    r, t = _same_shape(rendered, target)
    diff = r - t
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim_with_grad(r, t)
    value = (1 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s)
    return value, (1 - lambda_ssim) * g_l1 - lambda_ssim * g_s


def loss_silhouette(alpha, mask):
    """Mean absolute difference between rendered alpha and the mask."""
    a, m = _same_shape(alpha, mask)
    diff = a - m
    return float(np.abs(diff).mean()), np.sign(diff) / diff.size


def loss_depth_distortion(buffers: RenderBuffers):
    """Mean over rays with two or more fragments of ``sum_{i<j} w_i w_j |z_i - z_j|``.

    Returns ``(value, grad_frag_weight, grad_frag_depth)``. Fragments are stored
    in ascending depth order, so every pair difference is ``z_j - z_i``.
    """
    w, z = buffers.frag_weight, buffers.frag_depth
    nf = len(w)
    gw, gz = np.zeros(nf), np.zeros(nf)
    counts = buffers.frag_count
    nrays = int(np.sum(counts >= 2))
    if nrays == 0:
        return 0.0, gw, gz
    pix = buffers.frag_pixel()
    start = buffers.frag_start[:-1][pix]
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwz = np.concatenate([[0.0], np.cumsum(w * z)])
    idx = np.arange(nf)
    a_prev = cw[idx] - cw[start]
    s_prev = cwz[idx] - cwz[start]
    end = start + counts[pix]
    a_next = cw[end] - cw[idx + 1]
    s_next = cwz[end] - cwz[idx + 1]
    value = float(np.sum(w * (z * a_prev - s_prev))) / nrays
    gw = ((z * a_prev - s_prev) + (s_next - z * a_next)) / nrays
    gz = w * (a_prev - a_next) / nrays
    return value, gw, gz


def depth_normals(depth, alpha, camera):
    """Camera-space normals from finite differences of the back-projected depth map.

    Central differences where both neighbours are covered, one-sided at
    silhouettes and image borders. Returns ``(N, valid, cache)``.
    """
    H, W = depth.shape
    xs = (np.arange(W) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(H) + 0.5 - camera.cy) / camera.fy
    ray = np.stack(np.broadcast_arrays(xs[None, :], ys[:, None], np.ones((H, W))), -1)
    P = depth[..., None] * ray
    cov = alpha > 0

    def stencil(axis):
        n = cov.shape[axis]
        idx = np.arange(n)
        shape = [1, 1]
        shape[axis] = n
        idx = idx.reshape(shape)
        fwd_ok = np.zeros_like(cov)
        bwd_ok = np.zeros_like(cov)
        if axis == 1:
            fwd_ok[:, :-1] = cov[:, 1:]
            bwd_ok[:, 1:] = cov[:, :-1]
        else:
            fwd_ok[:-1, :] = cov[1:, :]
            bwd_ok[1:, :] = cov[:-1, :]
        central = fwd_ok & bwd_ok
        plus = np.where(fwd_ok, idx + 1, idx)
        minus = np.where(bwd_ok, idx - 1, idx)
        scale = np.where(central, 0.5, 1.0)
        ok = cov & (fwd_ok | bwd_ok)
        plus = np.broadcast_to(plus, cov.shape)
        minus = np.broadcast_to(minus, cov.shape)
        return plus, minus, scale, ok

    px, mx, sx, okx = stencil(1)
    py, my, sy, oky = stencil(0)
    rows, cols = np.indices((H, W))
    Px = (P[rows, px] - P[rows, mx]) * sx[..., None]
    Py = (P[py, cols] - P[my, cols]) * sy[..., None]
    v = np.cross(Py, Px)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    valid = okx & oky & (vn[..., 0] > 0)
    N = np.where(valid[..., None], v / np.where(vn > 0, vn, 1.0), 0.0)
    cache = dict(ray=ray, Px=Px, Py=Py, vn=vn, px=px, mx=mx, sx=sx, py=py, my=my, sy=sy, rows=rows, cols=cols)
    return N, valid, cache


def loss_normal(buffers: RenderBuffers, camera=None):
    """Mean over valid rays of ``sum_i w_i (1 - n_i . N)``.

    Per ray this equals ``alpha - N . (sum_i w_i n_i)``. Returns
    ``(value, grad_alpha, grad_depth, grad_normal_sum)``.
    """
    camera = camera if camera is not None else buffers._ctx["camera"]
    H, W = buffers.alpha.shape
    zeros = np.zeros((H, W)), np.zeros((H, W)), np.zeros((H, W, 3))
    N, valid, c = depth_normals(buffers.depth, buffers.alpha, camera)
    nv = int(valid.sum())
    if nv == 0:
        return (0.0,) + zeros
    ns = buffers.normal_sum
    per = buffers.alpha - np.sum(N * ns, -1)
    value = float(per[valid].sum()) / nv
    vmask = valid.astype(np.float64)
    g_alpha = vmask / nv
    g_nsum = -N * vmask[..., None] / nv
    g_N = -ns * vmask[..., None] / nv
    # N = v / |v|, v = Py x Px
    g_v = (g_N - N * np.sum(g_N * N, -1, keepdims=True)) / np.where(c["vn"] > 0, c["vn"], 1.0)
    g_Py = np.cross(c["Px"], g_v)
    g_Px = np.cross(g_v, c["Py"])
    g_P = np.zeros((H, W, 3))
    rows, cols = c["rows"], c["cols"]
    gx = g_Px * c["sx"][..., None]
    gy = g_Py * c["sy"][..., None]
    np.add.at(g_P, (rows, c["px"]), gx)
    np.add.at(g_P, (rows, c["mx"]), -gx)
    np.add.at(g_P, (c["py"], cols), gy)
    np.add.at(g_P, (c["my"], cols), -gy)
    g_depth = np.sum(g_P * c["ray"], -1)
    return value, g_alpha, g_depth, g_nsum


def loss_binding(surfels: Surfels, face_centroid, face_normal, config: BindingConfig = BindingConfig()):
    """Sum over surfels of ``max(d, delta) * (1 - n_surfel . n_face)``.

    ``face_centroid`` / ``face_normal`` are per-surfel rows of the source face
    plane. ``d`` is the point-to-plane distance of the deformed centroid; its
    gradient vanishes inside the cutoff. Returns ``(value, SurfelGrads)``.
    """
    n = len(surfels)
    g = SurfelGrads.zeros(n)
    if n == 0:
        return 0.0, g
    if not np.all(np.isfinite(face_normal)):
        raise ValueError("degenerate source face in binding loss")
    off = np.sum((surfels.centroid - face_centroid) * face_normal, -1)
    d = np.abs(off)
    m = np.cross(surfels.t_u, surfels.t_v)
    mn = np.linalg.norm(m, axis=-1, keepdims=True)
    ns = m / np.where(mn > 0, mn, 1.0)
    cos = np.sum(ns * face_normal, -1)
    dist = np.maximum(d, config.delta)
    value = float(np.sum(dist * np.maximum(1.0 - cos, 0.0)))
    g_d = np.where(d > config.delta, 1.0 - cos, 0.0)
    g.centroid = (g_d * np.sign(off))[:, None] * face_normal
    g_ns = -dist[:, None] * face_normal
    g_m = (g_ns - ns * np.sum(g_ns * ns, -1, keepdims=True)) / np.where(mn > 0, mn, 1.0)
    g.t_u = np.cross(surfels.t_v, g_m)
    g.t_v = np.cross(g_m, surfels.t_u)
    return value, g


def loss_total(parts: dict, weights: LossWeights) -> float:
    """Weighted sum of the named loss parts."""
    w = weights.as_dict()
    unknown = set(parts) - set(w)
    if unknown:
        raise KeyError(f"unknown loss parts: {sorted(unknown)}")
    return float(sum(w[k] * float(v) for k, v in parts.items()))
