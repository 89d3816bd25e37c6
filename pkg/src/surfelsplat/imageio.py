"""8-bit PNG and little-endian PFM reading/writing."""

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> Path:
    """Write an (H, W) gray or (H, W, 3) RGB image with values in [0, 1]."""
    path = Path(path)
    a = to_uint8(img)
    Image.fromarray(a, mode="L" if a.ndim == 2 else "RGB").save(path, format="PNG")
    return path


def read_png(path) -> np.ndarray:
    """Float image in [0, 1]; gray images come back 2D, everything else as RGB."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, img) -> Path:
    """Portable float map; rows stored bottom-to-top as the format requires."""
    path = Path(path)
    a = np.asarray(img, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs an (H, W) or (H, W, 3) array, got {a.shape}")
    h, w = a.shape[:2]
    with path.open("wb") as f:
        f.write(tag + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.ascontiguousarray(a[::-1]).tobytes())
    return path


def read_pfm(path) -> np.ndarray:
    with Path(path).open("rb") as f:
        tag = f.readline().strip()
        if tag not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        ch = 3 if tag == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * ch)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)
