"""Adam, the surfel model bound to a mesh sequence, and the two-stage fitting loop."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .dataset import Dataset
from .deform import (
    MASK_ROW, NetConfig, SceneBox, deform_backward, deform_forward, init_params, load_checkpoint, param_group,
    save_checkpoint,
)
from .inellipse import densify_layout, register_mesh
from .mesh import face_planes, loop_subdivision
from .metrics import ms_ssim, psnr, ssim
from .render import render, render_backward
from .scene import SurfelScene, apply_deformation, deformation_backward, init_scene, load_scene, save_scene

LOG_COLUMNS = ("iteration", "stage", "depth", "normal", "color", "silhouette", "binding", "total")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr, masks: dict | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    ``lr`` is a float or a per-name dict. ``masks`` optionally restricts the
    update (and the moment buffers) of a parameter to a boolean selection;
    parameters without a gradient entry are left alone.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter '{name}'")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group '{name}'")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        rate = lr[name] if isinstance(lr, dict) else lr
        sel = None if masks is None else masks.get(name)
        if sel is None:
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            p -= rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        else:
            m[sel] = state.beta1 * m[sel] + (1 - state.beta1) * g[sel]
            v[sel] = state.beta2 * v[sel] + (1 - state.beta2) * g[sel] ** 2
            p[sel] -= rate * (m[sel] / c1) / (np.sqrt(v[sel] / c2) + state.eps)
    return state


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the old norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    stage1_iters: int = 3000
    stage2_iters: int = 2000
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_net: float = 1e-3
    lr_hashgrid: float = 1e-3
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    binding_delta: float = 0.005
    sh_degree_stage1: int = 0
    sh_degree_stage2: int = 3
    subdivision_iters: int = 2
    fractal_depth: int = 1
    mask_logit_init: float = 6.0
    cull_backfaces: bool = True
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0
    deterministic: bool = True
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig.from_dict(self.net)
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if min(self.lr_sh, self.lr_opacity, self.lr_net, self.lr_hashgrid) <= 0:
            raise ValueError("learning rates must be positive")
        if not (0 <= self.sh_degree_stage1 <= 3 and 0 <= self.sh_degree_stage2 <= 3):
            raise ValueError("SH degree caps must lie in 0..3")
        if self.subdivision_iters < 0 or self.fractal_depth < 0:
            raise ValueError("subdivision iterations and fractal depth must be non-negative")
        L.BindingConfig(self.binding_delta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# model


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SurfelModel:
    """Surfel appearance + deformation network over a fixed mesh topology.

    The attached frames of every surfel are recomputed from each frame's
    (subdivided) mesh; the network supplies the residuals on top.
    """

    def __init__(self, coarse_mesh, cfg: TrainConfig, box: SceneBox, rng=None, scene: SurfelScene | None = None,
                 params: dict | None = None):
        self.cfg = cfg
        self.box = box
        self.sub = loop_subdivision(coarse_mesh, cfg.subdivision_iters)
        self.layout = densify_layout(len(self.sub.faces), cfg.fractal_depth)
        if scene is None:
            base = self.base_frames(coarse_mesh.vertices)
            scene = init_scene(base, self.layout.face_id, self.layout.corner_tag,
                               meta={"subdivision_iters": cfg.subdivision_iters, "fractal_depth": cfg.fractal_depth})
        if len(scene) != len(self.layout.face_id):
            raise ValueError(f"scene has {len(scene)} surfels, topology implies {len(self.layout.face_id)}")
        self.scene = scene
        self.sh = np.array(scene.sh, dtype=np.float64)
        self.opacity = np.array(scene.opacity, dtype=np.float64)
        self.opacity_logit = _logit(self.opacity)
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.params = params if params is not None else init_params(cfg.net, len(self.sub.faces), rng)
        self.mask_active = False

    def __len__(self):
        return len(self.layout.face_id)

    def base_frames(self, coarse_vertices):
        fine = self.sub.apply(coarse_vertices)
        return register_mesh(fine.vertices, fine.faces, self.cfg.fractal_depth)

    def face_rows(self, coarse_vertices):
        fine = self.sub.apply(coarse_vertices)
        c, n, _ = face_planes(fine.vertices, fine.faces)
        fid = self.layout.face_id
        return c[fid], n[fid]

    def residuals(self, base, theta, beta):
        res, cache = deform_forward(self.params, self.cfg.net, base.centroid, self.layout.face_id, theta, beta, self.box)
        if not self.mask_active:
            res.mask = np.ones(len(res))
        return res, cache

    def surfels(self, base, theta, beta):
        res, cache = self.residuals(base, theta, beta)
        return apply_deformation(base, res, self.opacity, self.sh), res, cache

    def render_frame(self, coarse_vertices, theta, beta, camera, degree_cap=3):
        s, _, _ = self.surfels(self.base_frames(coarse_vertices), theta, beta)
        return render(s, camera, degree_cap=degree_cap, cull_backfaces=self.cfg.cull_backfaces)

    def to_scene(self, coarse_vertices, theta, beta) -> SurfelScene:
        base = self.base_frames(coarse_vertices)
        res, _ = self.residuals(base, theta, beta)
        meta = dict(self.scene.meta)
        meta["mask_active"] = self.mask_active
        meta["cull_backfaces"] = self.cfg.cull_backfaces
        return SurfelScene(base, res, self.opacity.copy(), self.sh.copy(), self.layout.face_id.copy(),
                           self.layout.corner_tag.copy(), meta)

    def activate_mask(self):
        if not self.mask_active:
            self.params["dec1_b"][MASK_ROW] = self.cfg.mask_logit_init
            self.mask_active = True


# ---------------------------------------------------------------------------
# one training step


def _frame_losses(model: SurfelModel, base, face_c, face_n, frame, stage: int, need_grad=True):
    cfg = model.cfg
    cap = cfg.sh_degree_stage1 if stage == 1 else cfg.sh_degree_stage2
    s, res, cache = model.surfels(base, frame.theta, frame.beta)
    buf = render(s, frame.camera, degree_cap=cap, cull_backfaces=cfg.cull_backfaces)
    lc, gc = L.loss_color(buf.color, frame.image)
    ls, gs = L.loss_silhouette(buf.alpha, frame.mask)
    ld, gdw, gdz = L.loss_depth_distortion(buf)
    ln, gna, gnd, gnn = L.loss_normal(buf, frame.camera)
    lb, gb = L.loss_binding(s, face_c, face_n, L.BindingConfig(cfg.binding_delta))
    parts = {"depth": ld, "normal": ln, "color": lc, "silhouette": ls, "binding": lb}
    w = cfg.weights.as_dict()
    if stage == 2:
        w = {k: (v if k in ("color", "silhouette") else 0.0) for k, v in w.items()}
    total = L.loss_total(parts, L.LossWeights(w["color"], w["normal"], w["depth"], w["silhouette"], w["binding"]))
    if not need_grad:
        return parts, total, None
    g = render_backward(
        buf,
        grad_color=w["color"] * gc,
        grad_alpha=w["silhouette"] * gs + w["normal"] * gna,
        grad_depth=w["normal"] * gnd,
        grad_normal_sum=w["normal"] * gnn,
        grad_frag_weight=w["depth"] * gdw,
        grad_frag_depth=w["depth"] * gdz,
    )
    if w["binding"]:
        g.centroid += w["binding"] * gb.centroid
        g.t_u += w["binding"] * gb.t_u
        g.t_v += w["binding"] * gb.t_v
    gres = deformation_backward(base, res, model.opacity, g)
    if stage == 1:
        gres["mask"] = None
    else:
        gres["delta_p"] = gres["delta_s"] = gres["delta_r"] = None
    return parts, total, (gres, g.sh, cache)


def _trainable_masks(model: SurfelModel, stage: int):
    """Per-parameter boolean selections of what each stage may update."""
    sh_sel = np.zeros(model.sh.shape, bool)
    if stage == 1:
        sh_sel[:, 0, :] = True
        net = {k: None for k in model.params}
        return sh_sel, net
    sh_sel[:] = True
    net = {}
    for k in ("dec1_w", "dec1_b"):
        sel = np.zeros(model.params[k].shape, bool)
        sel[MASK_ROW] = True
        net[k] = sel
    return sh_sel, net


@dataclass
class FitResult:
    model: SurfelModel
    log: list
    scene: SurfelScene


def fit(dataset: Dataset, cfg: TrainConfig, out_dir=None, model: SurfelModel | None = None, progress=None) -> FitResult:
    """Two-stage optimisation of surfel appearance and the deformation network."""
    if not dataset.train_ids:
        raise ValueError("dataset has no training frames (all frames are held out)")
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = SurfelModel(dataset.frames[0].mesh, cfg, dataset.box, rng=np.random.default_rng(cfg.seed + 1))
    n_faces = len(dataset.frames[0].mesh.faces)
    if any(len(f.mesh.faces) != n_faces for f in dataset.frames):
        raise ValueError("mesh topology changes across frames")
    bases = [model.base_frames(f.mesh.vertices) for f in dataset.frames]
    rows = [model.face_rows(f.mesh.vertices) for f in dataset.frames]
    train = np.asarray(dataset.train_ids)
    out = Path(out_dir) if out_dir is not None else None
    queue = []
    log = []
    it = 0
    for stage, iters in ((1, cfg.stage1_iters), (2, cfg.stage2_iters)):
        if iters == 0:
            continue
        if stage == 2:
            model.activate_mask()
        state_net, state_app = AdamState(), AdamState()
        sh_sel, net_sel = _trainable_masks(model, stage)
        lr_net = {k: (cfg.lr_hashgrid if param_group(k) == "hashgrid" else cfg.lr_net) for k in model.params}
        for _ in range(iters):
            if not queue:
                # uniform sampling without replacement inside each pass over the training frames
                queue.extend(rng.permutation(train)[::-1].tolist())
            f = int(queue.pop())
            fr = dataset.frames[f]
            parts, total, (gres, g_sh, cache) = _frame_losses(model, bases[f], *rows[f], fr, stage)
            grads, _ = deform_backward(model.params, cfg.net, cache, gres)
            if stage == 2:
                grads = {k: grads[k] for k in net_sel}
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(model.params, grads, state_net, lr_net, masks=net_sel)
            app = {"sh": g_sh}
            app_lr = {"sh": cfg.lr_sh}
            app_params = {"sh": model.sh}
            if stage == 1:
                s = model.opacity
                app["opacity_logit"] = gres["opacity"] * s * (1 - s)
                app_lr["opacity_logit"] = cfg.lr_opacity
                app_params["opacity_logit"] = model.opacity_logit
            adam_step(app_params, app, state_app, app_lr, masks={"sh": sh_sel})
            if stage == 1:
                model.opacity = _sigmoid(model.opacity_logit)
            it += 1
            row = {"iteration": it, "stage": stage, **parts, "total": total}
            log.append(row)
            if progress is not None:
                progress(row)
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                _write_checkpoint(model, dataset, out / "checkpoints" / f"iter_{it:06d}")
    f0 = dataset.frames[0]
    scene = model.to_scene(f0.mesh.vertices, f0.theta, f0.beta)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_log(log, out / "loss_log.csv")
        _write_checkpoint(model, dataset, out)
    return FitResult(model, log, scene)


def _write_checkpoint(model: SurfelModel, dataset: Dataset, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    f0 = dataset.frames[0]
    save_scene(model.to_scene(f0.mesh.vertices, f0.theta, f0.beta), directory / "scene.msrf")
    save_checkpoint(model.params, model.cfg.net, directory / "net.mdnp", extra={
        "mask_active": model.mask_active, "box": model.box.to_dict(), "train": model.cfg.to_dict(),
    })


def load_model(fit_dir, dataset: Dataset) -> SurfelModel:
    """Rebuild a trained model from the ``scene.msrf`` / ``net.mdnp`` pair written by :func:`fit`."""
    fit_dir = Path(fit_dir)
    scene_path, net_path = fit_dir / "scene.msrf", fit_dir / "net.mdnp"
    missing = [str(p) for p in (scene_path, net_path) if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"no trained checkpoint: missing {', '.join(missing)}")
    params, net_cfg, extra = load_checkpoint(net_path)
    cfg = TrainConfig.from_dict({**extra.get("train", {}), "net": net_cfg})
    model = SurfelModel(dataset.frames[0].mesh, cfg, SceneBox.from_dict(extra["box"]), scene=load_scene(scene_path),
                        params=params)
    model.mask_active = bool(extra.get("mask_active", False))
    return model


def write_log(log, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for row in log:
            w.writerow([row["iteration"], row["stage"]] + [repr(float(row[k])) for k in LOG_COLUMNS[2:]])
    return path


def read_log(path) -> list:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("iteration", "stage") else float(v)) for k, v in r.items()} for r in rows]


def window_means(log, stage: int, window: int = 500) -> list:
    vals = np.array([r["total"] for r in log if r["stage"] == stage])
    n = len(vals) // window
    return [float(vals[k * window:(k + 1) * window].mean()) for k in range(n)]


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: SurfelModel, dataset: Dataset, frame_ids=None, noise_std: float = 0.0, noise_seed: int = 0):
    """Per-frame PSNR / SSIM / MS-SSIM with optional Gaussian noise on theta."""
    ids = dataset.held_out if frame_ids is None else frame_ids
    rng = np.random.default_rng(noise_seed)
    rows = []
    for f in ids:
        fr = dataset.frames[f]
        theta = fr.theta + (rng.normal(0.0, noise_std, fr.theta.shape) if noise_std > 0 else 0.0)
        img = np.clip(model.render_frame(fr.mesh.vertices, theta, fr.beta, fr.camera).color, 0.0, 1.0)
        rows.append({"frame": int(f), "psnr": psnr(img, fr.image), "ssim": ssim(img, fr.image),
                     "ms_ssim": ms_ssim(img, fr.image)})
    return rows


def max_face_distance(model: SurfelModel, dataset: Dataset, frame_ids=None) -> float:
    """Largest distance of a deformed surfel centroid from its source face plane."""
    ids = range(len(dataset)) if frame_ids is None else frame_ids
    worst = 0.0
    for f in ids:
        fr = dataset.frames[f]
        base = model.base_frames(fr.mesh.vertices)
        s, _, _ = model.surfels(base, fr.theta, fr.beta)
        c, n = model.face_rows(fr.mesh.vertices)
        worst = max(worst, float(np.abs(np.sum((s.centroid - c) * n, -1)).max()))
    return worst
