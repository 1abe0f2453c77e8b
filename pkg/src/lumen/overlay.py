"""Visual overlay of predicted and ground-truth lighting on an image.

Two small shaded spheres sit in the top-right corner (GT on the far right,
prediction to its left). A vertical pole with its cast shadow, lit by the
prediction, sits in the top-left corner. Light directions are camera
relative: the camera is treated as level, so elevation is -delta_tilt.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .lightmath import pan_tilt_to_unit

AMBIENT = 0.12


def light_vector(delta_pan: float, delta_tilt: float) -> np.ndarray:
    """Camera frame (x right, y up, z toward viewer) vector toward the light."""
    elev = math.radians(-delta_tilt)
    p = math.radians(delta_pan)
    return np.array([math.cos(elev) * math.sin(p), math.sin(elev), math.cos(elev) * math.cos(p)])


def shaded_sphere(diameter: int, light: np.ndarray, color: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    """uint8 sphere sprite and its coverage mask."""
    c = (diameter - 1) / 2.0
    r = diameter / 2.0
    yy, xx = np.mgrid[0:diameter, 0:diameter]
    u = (xx - c) / r
    v = (c - yy) / r
    rr = u * u + v * v
    mask = rr <= 1.0
    nz = np.sqrt(np.clip(1.0 - rr, 0.0, None))
    lam = np.clip(u * light[0] + v * light[1] + nz * light[2], 0.0, None)
    shade = AMBIENT + (1.0 - AMBIENT) * lam
    col = np.asarray(color, dtype=np.float64)
    col = col / max(col.max(), 1e-12)
    rgb = np.clip(shade[..., None] * col, 0.0, 1.0) ** (1.0 / 2.2)
    return np.floor(255.0 * rgb + 0.5).astype(np.uint8), mask


def _blit(dst: np.ndarray, sprite: np.ndarray, mask: np.ndarray, x0: int, y0: int) -> None:
    h, w = mask.shape
    H, W = dst.shape[:2]
    xs, ys = slice(max(0, x0), min(W, x0 + w)), slice(max(0, y0), min(H, y0 + h))
    sx = slice(xs.start - x0, xs.stop - x0)
    sy = slice(ys.start - y0, ys.stop - y0)
    region = dst[ys, xs]
    m = mask[sy, sx]
    region[m] = sprite[sy, sx][m]


def pole_shadow_tip(base: tuple[float, float], height: float, delta_pan: float, delta_tilt: float) -> tuple[float, float]:
    """Image-plane end of the pole shadow. Length is height / tan(elevation)."""
    elev = -delta_tilt
    if elev >= 90.0 - 1e-9:
        return base
    if elev <= 0.0:
        length = 2.0 * height
    else:
        length = min(2.0 * height, height / math.tan(math.radians(elev)))
    # the shadow points away from the light's horizontal direction, drawn foreshortened
    away = -pan_tilt_to_unit(delta_pan, 0.0)[:2]
    return base[0] + length * away[0], base[1] - 0.5 * length * away[1]


def _draw_line(img: np.ndarray, a: tuple[float, float], b: tuple[float, float], color, width: int = 1) -> None:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) * 2 + 1
    H, W = img.shape[:2]
    for t in np.linspace(0.0, 1.0, n):
        x = a[0] + t * (b[0] - a[0])
        y = a[1] + t * (b[1] - a[1])
        for dx in range(width):
            xi, yi = int(math.floor(x)) + dx, int(math.floor(y))
            if 0 <= xi < W and 0 <= yi < H:
                img[yi, xi] = color


def render_overlay(
    prediction: tuple[float, float, Sequence[float]],
    gt: tuple[float, float, Sequence[float]] | None,
    base_image: np.ndarray,
) -> np.ndarray:
    """Composite the lighting glyphs over a uint8 HxWx3 image of the same size."""
    img = np.array(base_image, dtype=np.uint8, copy=True)
    H, W = img.shape[:2]
    d = max(6, min(H, W) // 5)
    margin = max(1, d // 8)

    pd = prediction
    sprite, mask = shaded_sphere(d, light_vector(pd[0], pd[1]), pd[2])
    if gt is not None:
        gs, gm = shaded_sphere(d, light_vector(gt[0], gt[1]), gt[2])
        _blit(img, gs, gm, W - margin - d, margin)
        _blit(img, sprite, mask, W - 2 * (margin + d), margin)
    else:
        _blit(img, sprite, mask, W - margin - d, margin)

    height = float(d)
    base = (margin + d, margin + height * 1.2)
    tip = pole_shadow_tip(base, height, pd[0], pd[1])
    _draw_line(img, base, tip, (20, 20, 20), width=max(1, d // 10))
    _draw_line(img, (base[0], base[1] - height), base, (235, 235, 235), width=max(1, d // 10))
    return img
