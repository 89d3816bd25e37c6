"""Real spherical harmonics (degrees 0..3) for view-dependent surfel color."""

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)
C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

N_COEFFS = 16
MAX_DEGREE = 3


def n_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int = 3, with_grad: bool = False):
    """Evaluate the basis at unit directions ``dirs`` (..., 3).

    Returns ``(..., 16)`` basis values (bands above ``degree`` zeroed) and, when
    ``with_grad`` is set, the derivative of each basis polynomial with respect
    to x, y, z as ``(..., 16, 3)``.
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    shape = dirs.shape[:-1]
    B = np.zeros(shape + (N_COEFFS,))
    dB = np.zeros(shape + (N_COEFFS, 3)) if with_grad else None
    B[..., 0] = C0
    if degree >= 1:
        B[..., 1] = -C1 * y
        B[..., 2] = C1 * z
        B[..., 3] = -C1 * x
        if with_grad:
            dB[..., 1, 1] = -C1
            dB[..., 2, 2] = C1
            dB[..., 3, 0] = -C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[..., 4] = C2[0] * x * y
        B[..., 5] = C2[1] * y * z
        B[..., 6] = C2[2] * (2 * zz - xx - yy)
        B[..., 7] = C2[3] * x * z
        B[..., 8] = C2[4] * (xx - yy)
        if with_grad:
            dB[..., 4, :] = C2[0] * np.stack([y, x, 0 * x], -1)
            dB[..., 5, :] = C2[1] * np.stack([0 * x, z, y], -1)
            dB[..., 6, :] = C2[2] * np.stack([-2 * x, -2 * y, 4 * z], -1)
            dB[..., 7, :] = C2[3] * np.stack([z, 0 * x, x], -1)
            dB[..., 8, :] = C2[4] * np.stack([2 * x, -2 * y, 0 * x], -1)
    if degree >= 3:
        B[..., 9] = C3[0] * y * (3 * xx - yy)
        B[..., 10] = C3[1] * x * y * z
        B[..., 11] = C3[2] * y * (4 * zz - xx - yy)
        B[..., 12] = C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[..., 13] = C3[4] * x * (4 * zz - xx - yy)
        B[..., 14] = C3[5] * z * (xx - yy)
        B[..., 15] = C3[6] * x * (xx - 3 * yy)
        if with_grad:
            zero = 0 * x
            dB[..., 9, :] = C3[0] * np.stack([6 * x * y, 3 * xx - 3 * yy, zero], -1)
            dB[..., 10, :] = C3[1] * np.stack([y * z, x * z, x * y], -1)
            dB[..., 11, :] = C3[2] * np.stack([-2 * x * y, 4 * zz - xx - 3 * yy, 8 * y * z], -1)
            dB[..., 12, :] = C3[3] * np.stack([-6 * x * z, -6 * y * z, 6 * zz - 3 * xx - 3 * yy], -1)
            dB[..., 13, :] = C3[4] * np.stack([4 * zz - 3 * xx - yy, -2 * x * y, 8 * x * z], -1)
            dB[..., 14, :] = C3[5] * np.stack([2 * x * z, -2 * y * z, xx - yy], -1)
            dB[..., 15, :] = C3[6] * np.stack([3 * xx - 3 * yy, -6 * x * y, zero], -1)
    return B, dB


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n


def sh_eval(sh, direction, degree_cap: int = 3) -> np.ndarray:
    """RGB color of SH coefficients ``sh`` (..., 16, 3) seen along ``direction``.

    Bands above ``degree_cap`` are ignored and the result is clamped to [0, 1].
    The direction is normalised defensively.
    """
    if not 0 <= degree_cap <= MAX_DEGREE:
        raise ValueError(f"degree_cap must be in 0..3, got {degree_cap}")
    sh = np.asarray(sh, dtype=np.float64)
    d, _ = _normalize(np.asarray(direction, dtype=np.float64))
    B, _ = sh_basis(d, degree_cap)
    return np.clip(np.einsum("...k,...kc->...c", B, sh), 0.0, 1.0)


def sh_eval_backward(sh, direction, degree_cap, grad_color):
    """Gradients of :func:`sh_eval` w.r.t. the coefficients and the (unnormalised) direction."""
    sh = np.asarray(sh, dtype=np.float64)
    raw_dir = np.asarray(direction, dtype=np.float64)
    d, norm = _normalize(raw_dir)
    B, dB = sh_basis(d, degree_cap, with_grad=True)
    raw = np.einsum("...k,...kc->...c", B, sh)
    g = grad_color * ((raw > 0.0) & (raw < 1.0))
    g_sh = B[..., :, None] * g[..., None, :]
    g_d = np.einsum("...kj,...kc,...c->...j", dB, sh, g)
    # through d = raw_dir / |raw_dir|
    g_dir = (g_d - d * np.sum(g_d * d, axis=-1, keepdims=True)) / np.where(norm > 0, norm, 1.0)
    return g_sh, g_dir
