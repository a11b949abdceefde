"""Raster and strip import/export: PPM (P6, 8-bit), PNG, CSV.

Also provides the deterministic synthetic texture generator used by the tests
and the end-to-end fixtures (mixed-frequency content so density control has
both smooth and detailed regions to work on).
"""

from __future__ import annotations

import csv

import numpy as np
from PIL import Image

from .render import RasterImage, StripImage


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels), 0, 255).astype(np.uint8)


def write_png(path, image: RasterImage) -> None:
    Image.fromarray(to_uint8(image.pixels), mode="RGB").save(path, format="PNG")


def read_png(path) -> RasterImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return RasterImage(arr)


def write_ppm(path, image: RasterImage) -> None:
    """Binary P6, 8-bit."""
    arr = to_uint8(image.pixels)
    h, w = arr.shape[0], arr.shape[1]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path) -> RasterImage:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError("only binary P6 PPM is supported")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(int(data[i:j]))
        i = j
    i += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported, got maxval {maxval}")
    arr = np.frombuffer(data, dtype=np.uint8, count=h * w * 3, offset=i)
    return RasterImage(arr.reshape(h, w, 3).astype(np.float64))


def read_image(path) -> RasterImage:
    p = str(path)
    if p.lower().endswith(".ppm"):
        return read_ppm(p)
    return read_png(p)


def write_strip_csv(path, strip: StripImage, stamp: str | None = None) -> None:
    """N rows, 3 columns; optional reproducibility stamp as a comment line."""
    with open(path, "w", newline="") as f:
        if stamp:
            f.write(f"# {stamp}\n")
        w = csv.writer(f)
        w.writerow(["r", "g", "b"])
        for row in strip.values:
            w.writerow([f"{v:.17g}" for v in row])


def synthetic_texture(size: int = 256, seed: int = 0) -> RasterImage:
    """Deterministic multi-frequency test texture in [0, 255].

    Smooth color gradients plus mid-frequency waves, a high-frequency
    checker patch and a few sharp-edged disks: enough spectral variety to
    exercise densification, the scale link and the confidence filter.
    """
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    img[:, :, 0] = 110 + 90 * x
    img[:, :, 1] = 100 + 80 * y
    img[:, :, 2] = 120 + 60 * (1 - x) * y
    for _ in range(4):
        fx, fy = rng.uniform(2, 9, 2)
        ph = rng.uniform(0, 2 * np.pi)
        ch = rng.integers(0, 3)
        img[:, :, ch] += 38 * np.sin(2 * np.pi * (fx * x + fy * y) + ph)
    checker = ((np.floor(x * 32) + np.floor(y * 32)) % 2) * 90
    quad = (x > 0.55) & (y > 0.55)
    img[:, :, 0] += np.where(quad, checker - 45, 0.0)
    img[:, :, 1] += np.where(quad, 45 - checker, 0.0)
    for _ in range(6):
        cx, cy = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.04, 0.12)
        mask = (x - cx) ** 2 + (y - cy) ** 2 < r**2
        col = rng.uniform(0, 255, 3)
        img[mask] = 0.25 * img[mask] + 0.75 * col
    return RasterImage(np.clip(img, 0, 255))
