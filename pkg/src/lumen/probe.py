"""Light direction and colour from reference spheres in a photograph.

A specular sphere's highlight gives the light direction through the mirror
law; a diffuse sphere gives the light colour. Circles are supplied by the
caller (annotation files or masks); there is no automatic sphere detection.

Camera-frame convention: x to the right, y up, z toward the viewer. Pan is
measured from +z toward +x and tilt upward from the xz plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .lightmath import LightColor, wrap_deg
from .renderer import (
    Camera,
    Material,
    PointLight,
    RenderScene,
    look_at,
    make_sphere,
    render,
)

LUMA = np.array([0.2126, 0.7152, 0.0722])
KINDS = ("specular", "diffuse")
DISPLAY_GAMMA = 2.2


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class CircleAnnotation:
    cx: float
    cy: float
    radius: float
    kind: str = "specular"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"circle kind must be one of {KINDS}, got {self.kind!r}")
        if not self.radius > 2.0:
            raise ValueError(f"circle radius must exceed 2 px, got {self.radius}")

    def check_inside(self, width: int, height: int) -> None:
        if (
            self.cx - self.radius < 0
            or self.cy - self.radius < 0
            or self.cx + self.radius > width
            or self.cy + self.radius > height
        ):
            raise ValueError(f"circle {self} exceeds the {width}x{height} image")

    def pixel_mask(self, height: int, width: int, scale: float = 1.0) -> np.ndarray:
        """Pixels whose centres lie inside the (optionally scaled) circle."""
        yy, xx = np.mgrid[0:height, 0:width]
        r = self.radius * scale
        return (xx + 0.5 - self.cx) ** 2 + (yy + 0.5 - self.cy) ** 2 <= r * r


@dataclass(frozen=True)
class ProbeResult:
    pan: float
    tilt: float
    color: LightColor
    highlight: tuple[float, float]
    confidence: float


@dataclass(frozen=True)
class ReferenceCalibration:
    reference_pan: float
    reference_tilt: float
    mount_tilt_offset: float = 10.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.reference_pan, self.reference_tilt, self.mount_tilt_offset)):
            raise ValueError("calibration angles must be finite")


def luminance(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64)[..., :3] @ LUMA


def circle_from_mask(mask: np.ndarray, kind: str = "specular") -> CircleAnnotation:
    """Centroid and equal-area radius of the single foreground blob in ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask)
    if count == 0:
        raise ValueError("mask is empty")
    if count > 1:
        raise ValueError(f"mask has {count} components, expected 1")
    ys, xs = np.nonzero(mask)
    circle = CircleAnnotation(
        cx=float(xs.mean() + 0.5),
        cy=float(ys.mean() + 0.5),
        radius=math.sqrt(xs.size / math.pi),
        kind=kind,
    )
    circle.check_inside(mask.shape[1], mask.shape[0])
    return circle


def find_highlight(image: np.ndarray, circle: CircleAnnotation) -> tuple[tuple[float, float], float]:
    """Sub-pixel highlight position (x, y) and a confidence in [0, 1].

    The position is the luminance-weighted centroid of in-circle pixels at or
    above the 99th luminance percentile. Pixels at or below the median are
    never selected, so a flat background cannot tie into the percentile.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    circle.check_inside(w, h)
    inside = circle.pixel_mask(h, w)
    lum = luminance(img) if img.ndim == 3 else img
    vals = lum[inside]
    peak = float(vals.max())
    median = float(np.median(vals))
    if peak <= 0.0 or peak == median:
        raise ProbeError("no highlight: sphere region has no contrast")
    thresh = np.percentile(vals, 99.0)
    sel = inside & (lum >= thresh) & (lum > median)
    ys, xs = np.nonzero(sel)
    wts = lum[sel]
    x = float((wts * (xs + 0.5)).sum() / wts.sum())
    y = float((wts * (ys + 0.5)).sum() / wts.sum())
    return (x, y), (peak - median) / peak


def reflect_direction(circle: CircleAnnotation, highlight: Sequence[float]) -> np.ndarray:
    """Camera-frame unit vector toward the light under an orthographic view."""
    u = (highlight[0] - circle.cx) / circle.radius
    v = (circle.cy - highlight[1]) / circle.radius
    rr = u * u + v * v
    if rr >= 1.0:
        raise ProbeError(f"highlight on or beyond the silhouette (u^2+v^2={rr:.3f})")
    n = np.array([u, v, math.sqrt(1.0 - rr)])
    view = np.array([0.0, 0.0, 1.0])
    return 2.0 * float(n @ view) * n - view


def highlight_to_direction(circle: CircleAnnotation, highlight: Sequence[float]) -> tuple[float, float]:
    """Camera-relative (pan, tilt) in degrees of the light producing ``highlight``."""
    L = reflect_direction(circle, highlight)
    pan = math.degrees(math.atan2(L[0], L[2]))
    tilt = math.degrees(math.asin(max(-1.0, min(1.0, L[1]))))
    return pan, tilt


def apply_reference_correction(raw: tuple[float, float], cal: ReferenceCalibration) -> tuple[float, float]:
    pan = wrap_deg(raw[0] - cal.reference_pan)
    tilt = wrap_deg(raw[1] - cal.reference_tilt + cal.mount_tilt_offset)
    return pan, tilt


def calibrate(reference_image: np.ndarray, circle: CircleAnnotation, mount_tilt_offset: float = 10.0) -> ReferenceCalibration:
    hl, _ = find_highlight(reference_image, circle)
    pan, tilt = highlight_to_direction(circle, hl)
    return ReferenceCalibration(pan, tilt, mount_tilt_offset)


def diffuse_sphere_color(image: np.ndarray, circle: CircleAnnotation, clip_level: float | None = None) -> LightColor:
    """Mean linear colour of in-circle pixels in the 40th to 95th luminance percentile band.

    uint8 input is treated as display encoded (gamma 2.2) and decoded first.
    Pixels with any channel at ``clip_level`` (255 for uint8 input, otherwise
    unset) count as clipped and are ignored.
    """
    raw = np.asarray(image)
    encoded = raw.dtype == np.uint8
    if clip_level is None and encoded:
        clip_level = 255.0
    raw = raw[..., :3]
    img = (raw / 255.0) ** DISPLAY_GAMMA if encoded else raw.astype(np.float64)
    h, w = img.shape[:2]
    circle.check_inside(w, h)
    inside = circle.pixel_mask(h, w)
    if clip_level is not None:
        inside &= ~(raw >= clip_level).any(axis=-1)
    if not inside.any():
        raise ProbeError("saturated probe: every sphere pixel is clipped")
    lum = luminance(img)
    vals = lum[inside]
    lo, hi = np.percentile(vals, [40.0, 95.0])
    band = inside & (lum >= lo) & (lum <= hi)
    mean = img[band].mean(axis=0)
    top = mean.max()
    if top <= 0.0:
        raise ProbeError("diffuse sphere region is black")
    return LightColor(*(float(c) for c in mean / top))


def mask_spheres(image: np.ndarray, circles: Sequence[CircleAnnotation], pad: float = 0.10) -> np.ndarray:
    """Replace each circle (radius grown by ``pad``) with the mean colour of a ring around it.

    The ring spans 1.1x to 1.3x the padded radius and excludes pixels that
    belong to any masked circle, so overlapping circles mask their union.
    """
    img = np.asarray(image)
    out = img.copy()
    if not circles:
        return out
    h, w = img.shape[:2]
    grow = 1.0 + pad
    union = np.zeros((h, w), dtype=bool)
    for c in circles:
        union |= c.pixel_mask(h, w, grow)
    for c in circles:
        disc = c.pixel_mask(h, w, grow)
        ring = c.pixel_mask(h, w, grow * 1.3) & ~c.pixel_mask(h, w, grow * 1.1) & ~union
        if not ring.any():
            ring = ~union
        if not ring.any():
            fill = np.zeros(img.shape[2:], dtype=np.float64)
        else:
            fill = img[ring].astype(np.float64).mean(axis=0)
        if np.issubdtype(img.dtype, np.integer):
            fill = np.floor(fill + 0.5)
        out[disc] = fill.astype(img.dtype)
    return out


# ------------------------------------------------------------------- closed loop


def camera_frame_to_world(camera: Camera, v: Sequence[float]) -> np.ndarray:
    x, y, z = v
    return x * camera.right + y * camera.up - z * camera.forward


@dataclass(frozen=True)
class ProbeRig:
    """Synthetic probe setup: a sphere at the origin viewed from a horizontal camera."""

    distance: float = 20.0
    fov: float = 4.0
    size: int = 128
    sphere_radius: float = 0.5
    light_distance: float = 35.0
    intensity: float = 1.0
    ambient: float = 0.0

    def camera(self) -> Camera:
        return look_at((0.0, self.distance, 0.0), (0.0, 0.0, 0.0), self.fov)

    def circle(self, kind: str = "specular") -> CircleAnnotation:
        cam = self.camera()
        # projected silhouette radius of a sphere seen from distance d
        half = math.asin(self.sphere_radius / self.distance)
        r_px = math.tan(half) / math.tan(math.radians(cam.fov) / 2.0) * self.size / 2.0
        return CircleAnnotation(self.size / 2.0, self.size / 2.0, r_px, kind)

    def render(self, pan: float, tilt: float, material: Material, color=(1.0, 1.0, 1.0)) -> np.ndarray:
        """Linear HxWx3 render with the light at camera-relative (pan, tilt)."""
        cam = self.camera()
        p, t = math.radians(pan), math.radians(tilt)
        local = (math.cos(t) * math.sin(p), math.sin(t), math.cos(t) * math.cos(p))
        pos = self.light_distance * camera_frame_to_world(cam, local)
        light = PointLight(pos, np.asarray(color, dtype=np.float64), self.intensity)
        scene = RenderScene(
            [make_sphere((0.0, 0.0, 0.0), self.sphere_radius, material)], light, cam, None, self.ambient
        )
        return render(scene, self.size, self.size).data


SPECULAR_PROBE = Material(albedo=(0.0, 0.0, 0.0), roughness=0.0, specular=(1.0, 400.0))
DIFFUSE_PROBE = Material(albedo=(0.8, 0.8, 0.8), roughness=0.2)


def closed_loop_direction(
    rig: ProbeRig,
    pan: float,
    tilt: float,
    reference: tuple[float, float] = (0.0, 10.0),
    mount_tilt_offset: float = 10.0,
) -> tuple[float, float]:
    """Recovered (pan, tilt) for a synthetic probe lit from camera-relative (pan, tilt)."""
    circle = rig.circle("specular")
    ref_img = rig.render(reference[0], reference[1], SPECULAR_PROBE)
    cal = calibrate(ref_img, circle, mount_tilt_offset)
    img = rig.render(pan, tilt, SPECULAR_PROBE)
    hl, _ = find_highlight(img, circle)
    return apply_reference_correction(highlight_to_direction(circle, hl), cal)


def analyze(
    image: np.ndarray,
    specular: CircleAnnotation,
    diffuse: CircleAnnotation,
    cal: ReferenceCalibration | None = None,
) -> ProbeResult:
    hl, conf = find_highlight(image, specular)
    raw = highlight_to_direction(specular, hl)
    pan, tilt = apply_reference_correction(raw, cal) if cal is not None else raw
    color = diffuse_sphere_color(image, diffuse)
    return ProbeResult(pan, tilt, color, hl, float(min(1.0, max(0.0, conf))))
