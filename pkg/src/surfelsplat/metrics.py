"""Image quality metrics: PSNR, SSIM (with gradient) and MS-SSIM."""

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a, img_b) -> float:
    """Peak signal-to-noise ratio for images in [0, 1]; identical images give 99 dB."""
    a, b = _check_pair(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _blur(x, win):
    # zero-padded 'same' filtering over the two spatial axes; symmetric, so self-adjoint
    y = correlate1d(x, win, axis=0, mode="constant", cval=0.0)
    return correlate1d(y, win, axis=1, mode="constant", cval=0.0)


def _ssim_terms(a, b, win):
    mu_a, mu_b = _blur(a, win), _blur(b, win)
    e_aa, e_bb, e_ab = _blur(a * a, win), _blur(b * b, win), _blur(a * b, win)
    var_a = e_aa - mu_a ** 2
    var_b = e_bb - mu_b ** 2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + C1
    A2 = 2 * cov + C2
    B1 = mu_a ** 2 + mu_b ** 2 + C1
    B2 = var_a + var_b + C2
    return mu_a, mu_b, A1, A2, B1, B2


def ssim(img_a, img_b) -> float:
    """Mean SSIM over pixels and channels (11x11 Gaussian window, sigma 1.5)."""
    return ssim_with_grad(img_a, img_b, need_grad=False)[0]


def ssim_with_grad(img_a, img_b, need_grad=True):
    """SSIM and its gradient with respect to ``img_a``."""
    a, b = _check_pair(img_a, img_b)
    win = gaussian_window()
    mu_a, mu_b, A1, A2, B1, B2 = _ssim_terms(a, b, win)
    smap = (A1 * A2) / (B1 * B2)
    val = float(smap.mean())
    if not need_grad:
        return val, None
    g = np.full(a.shape, 1.0 / a.size)
    # partials of the map w.r.t. the filtered moments mu_a, E[a^2], E[ab]
    d_mu = smap * (2 * mu_b / A1 - 2 * mu_a / B1 - 2 * mu_b / A2 + 2 * mu_a / B2)
    d_eaa = -smap / B2
    d_eab = 2 * smap / A2
    grad = _blur(g * d_mu, win) + 2 * a * _blur(g * d_eaa, win) + b * _blur(g * d_eab, win)
    return val, grad


def _cs_and_ssim(a, b, win):
    _, _, A1, A2, B1, B2 = _ssim_terms(a, b, win)
    return float((A2 / B2).mean()), float(((A1 * A2) / (B1 * B2)).mean())


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(img_a, img_b) -> float:
    """Multi-scale SSIM over five dyadic scales with the standard weights."""
    a, b = _check_pair(img_a, img_b)
    win = gaussian_window()
    out = 1.0
    for k, w in enumerate(MS_SSIM_WEIGHTS):
        cs, full = _cs_and_ssim(a, b, win)
        if k == len(MS_SSIM_WEIGHTS) - 1:
            out *= max(full, 0.0) ** w
        else:
            out *= max(cs, 0.0) ** w
            a, b = _pool2(a), _pool2(b)
    return float(out)
