"""Tile-binned ray/splat rasterisation of 2D Gaussian surfels with analytic gradients.

Each pixel ray is intersected with the plane of every surfel binned to its
tile. The hit point expressed in the surfel's scaled tangent frame gives the
Gaussian weight, and fragments are composited front to back in exact
per-ray depth order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .camera import Camera
from .scene import Surfels, SurfelScene
from .sh import sh_eval, sh_eval_backward

TILE = 16
MIN_FOOTPRINT_PX = 0.3
EARLY_STOP_T = 1e-4


@dataclass
class RenderBuffers:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    depth: np.ndarray  # (H, W) expected depth, 0 where alpha == 0
    normal: np.ndarray  # (H, W, 3) unit camera-space normal, 0 where empty
    normal_sum: np.ndarray  # (H, W, 3) sum of w_i n_i
    transmittance: np.ndarray  # (H, W)
    frag_start: np.ndarray  # (H*W + 1,)
    frag_count: np.ndarray  # (H*W,)
    frag_surfel: np.ndarray  # (F,) in per-ray depth order
    frag_depth: np.ndarray  # (F,)
    frag_weight: np.ndarray  # (F,)
    _ctx: dict = field(default_factory=dict, repr=False)

    @property
    def shape(self):
        return self.alpha.shape

    def frag_pixel(self) -> np.ndarray:
        """Flat pixel index of every stored fragment."""
        return np.repeat(np.arange(len(self.frag_count)), self.frag_count)

    def frag_slice(self, x: int, y: int) -> slice:
        pix = y * self.alpha.shape[1] + x
        s = self.frag_start[pix]
        return slice(s, s + self.frag_count[pix])


@dataclass
class SurfelGrads:
    """Gradients with respect to deformed surfel attributes (world space)."""

    centroid: np.ndarray
    t_u: np.ndarray
    t_v: np.ndarray
    scale: np.ndarray
    opacity: np.ndarray
    sh: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "SurfelGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 2)), np.zeros(n), np.zeros((n, 16, 3)))

    def __iadd__(self, other):
        for k in ("centroid", "t_u", "t_v", "scale", "opacity", "sh"):
            getattr(self, k)[...] += getattr(other, k)
        return self


def _prepare(s: Surfels, cam: Camera, degree_cap: int):
    R, T = cam.R, cam.T
    p_c = s.centroid @ R.T + T
    z_c = p_c[:, 2]
    k = MIN_FOOTPRINT_PX / (0.5 * (cam.fx + cam.fy))
    floor = k * z_c
    s_eff = np.maximum(s.scale, floor[:, None])
    tu_c = s.t_u @ R.T
    tv_c = s.t_v @ R.T
    A = s_eff[:, :1] * tu_c
    B = s_eff[:, 1:] * tv_c
    m = np.cross(s.t_u, s.t_v)
    mn = np.linalg.norm(m, axis=1, keepdims=True)
    n_w = m / np.where(mn > 0, mn, 1.0)
    n_c = n_w @ R.T
    flip = np.where(np.sum(n_c * p_c, axis=1) > 0, -1.0, 1.0)
    nrm = n_c * flip[:, None]
    view = s.centroid - cam.center
    col = sh_eval(s.sh, view, degree_cap) if len(s) else np.zeros((0, 3))
    return dict(p_c=p_c, z_c=z_c, k=k, floor=floor, s_eff=s_eff, tu_c=tu_c, tv_c=tv_c, A=A, B=B,
                m=m, mn=mn, n_w=n_w, flip=flip, nrm=nrm, view=view, col=col)


def _bin(prep, cam: Camera, cull_backfaces: bool = False):
    p_c, A, B = prep["p_c"], prep["A"], prep["B"]
    W, H = cam.width, cam.height
    n = len(p_c)
    X, Y, Z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    r = 3.0 * np.sqrt(np.sum(A * A, 1) + np.sum(B * B, 1))
    visible = (Z > cam.near) & (Z < cam.far) & np.isfinite(r)
    if cull_backfaces:
        visible &= prep["flip"] > 0
    zmin = Z - r
    safe = zmin > cam.near
    zlo = np.where(safe, zmin, 1.0)
    zhi = Z + r
    with np.errstate(divide="ignore", invalid="ignore"):
        xmin = np.minimum((X - r) / zlo, (X - r) / zhi) * cam.fx + cam.cx - 0.5
        xmax = np.maximum((X + r) / zlo, (X + r) / zhi) * cam.fx + cam.cx - 0.5
        ymin = np.minimum((Y - r) / zlo, (Y - r) / zhi) * cam.fy + cam.cy - 0.5
        ymax = np.maximum((Y + r) / zlo, (Y + r) / zhi) * cam.fy + cam.cy - 0.5
    xmin = np.where(safe, xmin, -1.0)
    ymin = np.where(safe, ymin, -1.0)
    xmax = np.where(safe, xmax, W)
    ymax = np.where(safe, ymax, H)
    visible &= (xmax >= 0) & (xmin <= W - 1) & (ymax >= 0) & (ymin <= H - 1)
    lo_x = np.clip(np.floor(np.nan_to_num(xmin)), 0, W - 1).astype(np.int64)
    hi_x = np.clip(np.ceil(np.nan_to_num(xmax)), 0, W - 1).astype(np.int64)
    lo_y = np.clip(np.floor(np.nan_to_num(ymin)), 0, H - 1).astype(np.int64)
    hi_y = np.clip(np.ceil(np.nan_to_num(ymax)), 0, H - 1).astype(np.int64)
    tiles_x = (W + TILE - 1) // TILE
    tiles_y = (H + TILE - 1) // TILE
    start, ids = _kernels.bin_tiles(lo_x, hi_x, lo_y, hi_y, visible if n else np.zeros(0, bool), tiles_x, tiles_y, TILE)
    return start, ids, tiles_x


def _as_surfels(scene) -> Surfels:
    if isinstance(scene, SurfelScene):
        return scene.deformed()
    return scene


def render(scene, camera: Camera, degree_cap: int = 3, early_stop: bool = True,
           cull_backfaces: bool = False) -> RenderBuffers:
    """Render a :class:`SurfelScene` (its deformed state) or raw :class:`Surfels`.

    ``early_stop=False`` disables transmittance-based ray termination.
    Surfels are two-sided unless ``cull_backfaces`` is set, in which case a
    surfel whose normal ``t_u x t_v`` points away from the camera is skipped.
    """
    s = _as_surfels(scene)
    s = Surfels(*(np.ascontiguousarray(a, dtype=np.float64) for a in (s.centroid, s.t_u, s.t_v, s.scale, s.opacity, s.sh)))
    prep = _prepare(s, camera, degree_cap)
    start, ids, tiles_x = _bin(prep, camera, cull_backfaces)
    out = _kernels.forward(
        prep["p_c"], prep["A"], prep["B"], s.opacity, prep["col"], prep["nrm"],
        start, ids, tiles_x, TILE, camera.width, camera.height,
        camera.fx, camera.fy, camera.cx, camera.cy, camera.near, camera.far,
        EARLY_STOP_T if early_stop else -1.0,
    )
    color, alpha, depth, nsum, trans, fstart, fcount, fsurf, fdepth, fweight = out
    if fstart[-1] != fcount.sum():
        # early termination left unused slots; compact so frag_start is the running count
        keep = np.arange(fstart[-1]) - np.repeat(fstart[:-1], np.diff(fstart)) < np.repeat(fcount, np.diff(fstart))
        fsurf, fdepth, fweight = fsurf[keep], fdepth[keep], fweight[keep]
        fstart = np.concatenate([[0], np.cumsum(fcount)])
    nn = np.linalg.norm(nsum, axis=-1, keepdims=True)
    normal = np.where(nn > 0, nsum / np.where(nn > 0, nn, 1.0), 0.0)
    return RenderBuffers(
        color, alpha, depth, normal, nsum, trans, fstart, fcount,
        fsurf, fdepth, fweight,
        _ctx=dict(surfels=s, camera=camera, degree_cap=degree_cap, prep=prep),
    )


def render_silhouette(scene, camera: Camera, cull_backfaces: bool = False) -> np.ndarray:
    """Accumulated opacity map (the ``alpha`` buffer of :func:`render`)."""
    return render(scene, camera, degree_cap=0, cull_backfaces=cull_backfaces).alpha


def render_backward(
    buffers: RenderBuffers,
    grad_color=None,
    grad_alpha=None,
    grad_depth=None,
    grad_normal_sum=None,
    grad_frag_weight=None,
    grad_frag_depth=None,
) -> SurfelGrads:
    """Exact gradients of a forward render w.r.t. the deformed surfel attributes.

    Upstream gradients may be given on the color, alpha, expected-depth and
    weighted-normal-sum images, and on the per-fragment weights and depths
    (in ``frag_*`` order). Missing upstream terms are treated as zero.
    """
    ctx = buffers._ctx
    s: Surfels = ctx["surfels"]
    cam: Camera = ctx["camera"]
    prep = ctx["prep"]
    H, W = buffers.alpha.shape
    nf = len(buffers.frag_surfel)

    def img(g, shape):
        if g is None:
            return np.zeros(shape)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != shape:
            raise ValueError(f"gradient shape {g.shape} does not match {shape}")
        return np.ascontiguousarray(g)

    gC = img(grad_color, (H, W, 3))
    gA_img = img(grad_alpha, (H, W))
    gD_img = img(grad_depth, (H, W))
    gN_img = img(grad_normal_sum, (H, W, 3))
    gfw = img(grad_frag_weight, (nf,))
    gfz = img(grad_frag_depth, (nf,))

    n = len(s)
    if n == 0:
        return SurfelGrads.zeros(0)
    gP, gA, gB, gop, gcol, gn = _kernels.backward(
        prep["p_c"], prep["A"], prep["B"], s.opacity, prep["col"], prep["nrm"],
        W, H, cam.fx, cam.fy, cam.cx, cam.cy,
        buffers.frag_start, buffers.frag_count, buffers.frag_surfel, buffers.alpha, buffers.depth,
        gC, gA_img, gD_img, gN_img, gfw, gfz,
    )
    R = cam.R
    s_eff, floor = prep["s_eff"], prep["floor"]
    # A = s_eff[0] * tu_c, B = s_eff[1] * tv_c
    g_tu_c = gA * s_eff[:, :1]
    g_tv_c = gB * s_eff[:, 1:]
    g_seff = np.stack([np.sum(gA * prep["tu_c"], 1), np.sum(gB * prep["tv_c"], 1)], 1)
    clamped = s.scale < floor[:, None]
    g_scale = np.where(clamped, 0.0, g_seff)
    g_zc = np.sum(np.where(clamped, g_seff, 0.0), 1) * prep["k"]
    gP = gP.copy()
    gP[:, 2] += g_zc
    # oriented normal -> world unit normal -> cross product of tangents
    g_nw = (gn * prep["flip"][:, None]) @ R
    n_w, mn = prep["n_w"], prep["mn"]
    g_m = (g_nw - n_w * np.sum(g_nw * n_w, 1, keepdims=True)) / np.where(mn > 0, mn, 1.0)
    g_tu = g_tu_c @ R + np.cross(s.t_v, g_m)
    g_tv = g_tv_c @ R + np.cross(g_m, s.t_u)
    g_sh, g_view = sh_eval_backward(s.sh, prep["view"], ctx["degree_cap"], gcol)
    g_p = gP @ R + g_view
    return SurfelGrads(g_p, g_tu, g_tv, g_scale, gop, g_sh)
