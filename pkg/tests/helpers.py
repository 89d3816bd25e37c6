"""Small scene builders shared by the render, loss and acceptance tests."""

import numpy as np

from surfelsplat.camera import Camera
from surfelsplat.scene import Surfels
from surfelsplat.sh import C0


def axis_camera(size=8, f=10.0):
    # principal point on a pixel center so the central ray is the optical axis
    c = size / 2 - 0.5
    return Camera(f, f, c, c, np.eye(4), size, size)


def facing_surfels(depths, opacities, colors, scale=0.5):
    """Camera-facing surfels centred on the optical axis of :func:`axis_camera`."""
    n = len(depths)
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = np.asarray(colors, dtype=float) / C0
    return Surfels(
        np.column_stack([np.zeros(n), np.zeros(n), depths]).astype(float),
        np.tile([1.0, 0.0, 0.0], (n, 1)),
        np.tile([0.0, 1.0, 0.0], (n, 1)),
        np.full((n, 2), float(scale)),
        np.asarray(opacities, dtype=float),
        sh,
    )


def brute_distortion(buf):
    total, rays = 0.0, 0
    for pix, cnt in enumerate(buf.frag_count):
        if cnt < 2:
            continue
        s = buf.frag_start[pix]
        w = buf.frag_weight[s:s + cnt]
        z = buf.frag_depth[s:s + cnt]
        rays += 1
        total += sum(w[i] * w[j] * abs(z[i] - z[j]) for i in range(cnt) for j in range(i + 1, cnt))
    return total / rays if rays else 0.0
