"""Dataset manifests and the synthetic deforming-sphere generator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, look_at
from .deform import SceneBox
from .imageio import read_png, write_png
from .inellipse import register_mesh
from .mesh import TriangleMesh, icosahedron, load_mesh, loop_subdivision, save_mesh
from .render import render
from .scene import Residuals, apply_deformation
from .sh import C0

MANIFEST_FORMAT = "surfelsplat-dataset"
MANIFEST_VERSION = 1


class DatasetError(ValueError):
    """Raised with every problem found in a manifest, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid dataset:\n  " + "\n  ".join(self.problems))


@dataclass
class Frame:
    image: np.ndarray
    mask: np.ndarray
    mesh: TriangleMesh
    theta: np.ndarray
    beta: np.ndarray
    camera: Camera


@dataclass
class Dataset:
    root: Path
    frames: list
    theta_dim: int
    beta_dim: int
    box: SceneBox
    held_out: list = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    @property
    def train_ids(self) -> list:
        held = set(self.held_out)
        return [i for i in range(len(self.frames)) if i not in held]


def _read_cond(path):
    d = json.loads(Path(path).read_text())
    return np.asarray(d["theta"], dtype=np.float64), np.asarray(d["beta"], dtype=np.float64)


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a manifest; all problems are collected before raising."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DatasetError([f"manifest not found: {manifest_path}"])
    try:
        m = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError([f"manifest is not valid JSON: {e}"]) from e
    root = manifest_path.parent
    problems = []
    for key in ("theta_dim", "beta_dim", "frames", "scene_box"):
        if key not in m:
            problems.append(f"manifest lacks '{key}'")
    if problems:
        raise DatasetError(problems)
    if not m["frames"]:
        raise DatasetError(["manifest lists no frames"])

    for i, fr in enumerate(m["frames"]):
        for key in ("image", "mask", "mesh", "cond"):
            if key not in fr:
                problems.append(f"frame {i}: no '{key}' entry")
            elif not (root / fr[key]).is_file():
                problems.append(f"frame {i}: missing {key} file {root / fr[key]}")
        if "camera" not in fr:
            problems.append(f"frame {i}: no camera")
    if problems:
        raise DatasetError(problems)

    frames = []
    faces0 = None
    shape0 = None
    for i, fr in enumerate(m["frames"]):
        try:
            cam = Camera.from_dict(fr["camera"])
            mesh = load_mesh(root / fr["mesh"])
            img = read_png(root / fr["image"])
            mask = read_png(root / fr["mask"])
            theta, beta = _read_cond(root / fr["cond"])
        except (ValueError, KeyError) as e:
            problems.append(f"frame {i}: {e}")
            continue
        if mask.ndim == 3:
            mask = mask.mean(-1)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, -1)
        if faces0 is None:
            faces0 = mesh.faces
        elif not np.array_equal(mesh.faces, faces0):
            problems.append(f"frame {i}: mesh topology differs from frame 0")
        if shape0 is None:
            shape0 = img.shape
        elif img.shape != shape0:
            problems.append(f"frame {i}: image size {img.shape[:2]} differs from frame 0 {shape0[:2]}")
        if mask.shape != img.shape[:2]:
            problems.append(f"frame {i}: mask size {mask.shape} does not match image {img.shape[:2]}")
        if img.shape[:2] != (cam.height, cam.width):
            problems.append(f"frame {i}: camera size {(cam.height, cam.width)} does not match image {img.shape[:2]}")
        if theta.size != m["theta_dim"] or beta.size != m["beta_dim"]:
            problems.append(f"frame {i}: conditioning sizes ({theta.size}, {beta.size}) differ from manifest "
                            f"({m['theta_dim']}, {m['beta_dim']})")
        frames.append(Frame(img, mask, mesh, theta, beta, cam))
    if problems:
        raise DatasetError(problems)
    held = [int(k) for k in m.get("held_out", [])]
    bad = [k for k in held if not 0 <= k < len(frames)]
    if bad:
        raise DatasetError([f"held-out frame index {k} out of range" for k in bad])
    return Dataset(root, frames, int(m["theta_dim"]), int(m["beta_dim"]), SceneBox.from_dict(m["scene_box"]), held)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticConfig:
    frames: int = 20
    size: int = 64
    focal: float = 80.0
    radius: float = 0.01
    distance: float = 0.035
    theta_dim: int = 45
    beta_dim: int = 10
    subdivision_iters: int = 2
    fractal_depth: int = 1
    holdout_every: int = 5
    detail_amplitude: float = 0.01
    opacity: float = 0.9
    cull_backfaces: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.radius < self.distance:
            raise ValueError("the camera must sit outside the object")
        if self.frames < 1 or self.size < 8:
            raise ValueError("synthetic data needs at least one frame of at least 8x8 pixels")
        if self.theta_dim < 6 or self.beta_dim < 3:
            raise ValueError("synthetic deformation reads theta[0:6] and beta[0:3]")

    def to_dict(self) -> dict:
        return asdict(self)


def _axis_angle(r):
    a = np.linalg.norm(r)
    if a < 1e-15:
        return np.eye(3)
    k = r / a
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


def deform_vertices(v, theta, beta):
    """Smooth pose/shape-driven deformation of the canonical sphere."""
    v = np.asarray(v, dtype=np.float64)
    out = v * (1.0 + 0.15 * np.tanh(beta[:3]))
    twist = 0.6 * theta[0] * out[:, 1]
    c, s = np.cos(twist), np.sin(twist)
    x, z = out[:, 0] * c + out[:, 2] * s, -out[:, 0] * s + out[:, 2] * c
    out = np.column_stack([x * (1.0 + 0.2 * theta[1] * out[:, 1]), out[:, 1], z])
    return out @ _axis_angle(0.6 * np.asarray(theta[2:5])).T


def smooth_trajectories(rng, n_frames, dim, amplitude=0.3):
    freq = rng.uniform(0.5, 1.5, dim)
    phase = rng.uniform(0, 2 * np.pi, dim)
    t = np.arange(n_frames)[:, None] / max(n_frames, 1)
    return amplitude * np.sin(2 * np.pi * freq * t + phase)


def reference_appearance(canon_centroid):
    """Known SH texture: smooth DC color field plus a weak band-1 term."""
    c = np.asarray(canon_centroid)
    n = len(c)
    sh = np.zeros((n, 16, 3))
    color = 0.5 + 0.25 * np.sin(3.0 * c + np.array([1.0, 2.0, 3.0]))
    sh[:, 0, :] = color / C0
    sh[:, 1:4, :] = 0.04 * np.sin(2.0 * c[:, :, None] + np.arange(3))
    return sh


def make_synthetic(out_dir, cfg: SyntheticConfig = SyntheticConfig()) -> Path:
    """Write a self-rendered dataset (meshes, images, masks, conditioning, manifest)."""
    out = Path(out_dir)
    rng = np.random.default_rng(cfg.seed)
    base = icosahedron()
    thetas = smooth_trajectories(rng, cfg.frames, cfg.theta_dim)
    beta = rng.normal(0.0, 0.3, cfg.beta_dim)
    meshes = [base.with_vertices(cfg.radius * deform_vertices(base.vertices, th, beta)) for th in thetas]
    box = SceneBox.around(np.concatenate([m.vertices for m in meshes]))

    sub = loop_subdivision(base, cfg.subdivision_iters)
    canon = register_mesh(sub.apply(base.vertices).vertices, sub.faces, cfg.fractal_depth)  # unit sphere
    sh = reference_appearance(canon.centroid)
    n = len(canon)
    opacity = np.full(n, cfg.opacity)
    W2C = look_at((0.0, 0.0, -cfg.distance), (0.0, 0.0, 0.0))
    cam = Camera(cfg.focal, cfg.focal, cfg.size / 2, cfg.size / 2, W2C, cfg.size, cfg.size)

    for d in ("meshes", "images", "masks", "cond"):
        (out / d).mkdir(parents=True, exist_ok=True)
    frames = []
    for f, (mesh, th) in enumerate(zip(meshes, thetas)):
        frames_f = register_mesh(sub.apply(mesh.vertices).vertices, sub.faces, cfg.fractal_depth)
        # pose-dependent fine detail along the surfel normal
        dp = np.zeros((n, 3))
        dp[:, 2] = cfg.radius * cfg.detail_amplitude * np.sin(4.0 * canon.centroid[:, 0] + th[5]) * np.cos(4.0 * canon.centroid[:, 1])
        res = Residuals(dp, np.zeros((n, 2)), np.zeros((n, 3)), np.ones(n))
        buf = render(apply_deformation(frames_f, res, opacity, sh), cam, cull_backfaces=cfg.cull_backfaces)
        name = f"frame_{f:04d}"
        save_mesh(mesh, out / "meshes" / f"{name}.obj")
        write_png(out / "images" / f"{name}.png", buf.color)
        write_png(out / "masks" / f"{name}.png", (buf.alpha > 0.5).astype(np.float64))
        (out / "cond" / f"{name}.json").write_text(json.dumps({"theta": th.tolist(), "beta": beta.tolist()}))
        frames.append({
            "image": f"images/{name}.png",
            "mask": f"masks/{name}.png",
            "mesh": f"meshes/{name}.obj",
            "cond": f"cond/{name}.json",
            "camera": cam.to_dict(),
        })
    held = list(range(0, cfg.frames, cfg.holdout_every)) if cfg.holdout_every > 0 else []
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "theta_dim": cfg.theta_dim,
        "beta_dim": cfg.beta_dim,
        "scene_box": box.to_dict(),
        "held_out": held,
        "generator": cfg.to_dict(),
        "frames": frames,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
