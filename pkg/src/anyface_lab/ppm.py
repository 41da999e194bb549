"""Binary PPM (P6) images and a tiny line-plot rasterizer."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import InputError


def to_bytes(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto 0..255 with rounding."""
    img = np.asarray(image, dtype=np.float64)
    return np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return np.asarray(pixels, dtype=np.float64) / 127.5 - 1.0


def write_ppm(path, image: np.ndarray, *, raw: bool = False) -> Path:
    """Write ``[H, W, 3]``; ``raw=True`` means the array already holds 0..255 bytes."""
    pixels = np.asarray(image, dtype=np.uint8) if raw else to_bytes(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InputError(f"PPM needs an [H, W, 3] image, got {pixels.shape}")
    h, w, _ = pixels.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    """Read a P6 file back into [-1, 1] floats."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise InputError(f"{path}: only 8-bit P6 images are supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise InputError(f"{path}: truncated PPM body")
    return from_bytes(np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3))


PALETTE = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189), (255, 127, 14), (23, 190, 207)]


def plot_lines(series: dict[str, tuple[np.ndarray, np.ndarray]], width: int = 320, height: int = 200,
               margin: int = 12) -> np.ndarray:
    """Rasterize named (x, y) series onto a white canvas; returns uint8 ``[H, W, 3]``."""
    canvas = np.full((height, width, 3), 255, dtype=np.uint8)
    pts = [(np.asarray(x, float), np.asarray(y, float)) for x, y in series.values()]
    pts = [(x, y) for x, y in pts if x.size]
    if not pts:
        return canvas
    xs = np.concatenate([x for x, _ in pts])
    ys = np.concatenate([y for _, y in pts])
    x0, x1 = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    y0, y1 = ys.min(), ys.max() if ys.max() > ys.min() else ys.min() + 1
    canvas[height - margin, margin:width - margin] = 0
    canvas[margin:height - margin, margin] = 0

    def project(x, y):
        px = margin + (x - x0) / (x1 - x0) * (width - 2 * margin - 1)
        py = height - margin - (y - y0) / (y1 - y0) * (height - 2 * margin - 1)
        return px, py

    for k, (x, y) in enumerate(pts):
        color = PALETTE[k % len(PALETTE)]
        px, py = project(x, y)
        for i in range(len(px) - 1 if len(px) > 1 else 1):
            j = min(i + 1, len(px) - 1)
            n = int(max(abs(px[j] - px[i]), abs(py[j] - py[i]))) + 1
            lx = np.rint(np.linspace(px[i], px[j], n)).astype(int)
            ly = np.rint(np.linspace(py[i], py[j], n)).astype(int)
            canvas[np.clip(ly, 0, height - 1), np.clip(lx, 0, width - 1)] = color
    return canvas
