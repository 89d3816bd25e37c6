from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; OpenCV axes (x right, y down, z forward).

    The ray through pixel ``(x, y)`` passes through ``(x + 0.5, y + 0.5)`` in
    continuous image coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        M = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "world_to_camera", M)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be smaller than far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        R = M[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-10) or not np.allclose(M[3], [0, 0, 0, 1]):
            raise ValueError("world_to_camera must be a rigid transform")

    @property
    def R(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def T(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.T

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "world_to_camera": self.world_to_camera.tolist(),
            "width": self.width, "height": self.height, "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        missing = [k for k in ("fx", "fy", "cx", "cy", "world_to_camera", "width", "height") if k not in d]
        if missing:
            raise ValueError(f"camera is missing fields: {', '.join(missing)}")
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            np.asarray(d["world_to_camera"], dtype=np.float64).reshape(4, 4),
            int(d["width"]), int(d["height"]),
            float(d.get("near", 0.01)), float(d.get("far", 100.0)),
        )

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def look_at(eye, target, down=(0.0, -1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at ``eye`` looking at ``target``.

    ``down`` is the world direction that should appear as image-down (+y).
    """
    eye, target, down = (np.asarray(a, dtype=np.float64) for a in (eye, target, down))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(down, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    return M
