"""Image file I/O: PFM float maps, 8-bit PNG, and the sRGB transfer."""

from __future__ import annotations

import numpy as np
from PIL import Image


def write_pfm(path, data):
    """PFM, little-endian float32, rows bottom-to-top. 'Pf' for 2D maps,
    'PF' for 3-channel maps."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf\n"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF\n"
    else:
        raise ValueError("PFM supports HxW or HxWx3 arrays")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file: magic {magic!r}")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        count = w * h * (3 if magic == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype="<f4" if scale < 0 else ">f4",
                             count=count)
    shape = (h, w, 3) if magic == b"PF" else (h, w)
    return np.ascontiguousarray(data.reshape(shape)[::-1]).astype(np.float64)


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * x ** (1 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def write_png_srgb(path, linear_rgb):
    """Linear [0,1] HxWx3 -> 8-bit sRGB PNG."""
    srgb = linear_to_srgb(np.asarray(linear_rgb))
    Image.fromarray((srgb * 255 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_png_linear(path):
    """8-bit sRGB PNG -> linear [0,1] HxWx3."""
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(img)


def write_png_mask(path, mask):
    Image.fromarray(np.where(np.asarray(mask) != 0, 255, 0).astype(np.uint8),
                    mode="L").save(path)


def read_png_mask(path):
    return (np.asarray(Image.open(path).convert("L")) >= 128)
