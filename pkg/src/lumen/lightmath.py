"""Angle encodings, angular error metrics and Planckian light colours.

Conventions used across the package:

* pan is an azimuth in degrees; absolute pans live in [0, 360), camera-relative
  differences in (-180, 180].
* tilt is an elevation above the ground plane in degrees (90 = zenith).
* a (pan, tilt) pair maps to the unit vector
  (cos tilt * sin pan, cos tilt * cos pan, sin tilt).
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np

from lumen._cie import CMF_1931_5NM

__all__ = [
    "LightColor",
    "SphericalPose",
    "DirectionEncoding",
    "wrap_deg",
    "wrap_pan",
    "encode_angle",
    "decode_angle",
    "encode_direction",
    "pan_tilt_to_unit",
    "direction_error_deg",
    "angular_distance_deg",
    "rgb_angular_error_deg",
    "planckian_rgb",
    "planckian_uv",
    "rgb_to_uv",
    "sample_near_planckian",
    "CCT_MIN",
    "CCT_MAX",
    "DEFAULT_CCT_RANGE",
]

CCT_MIN = 1000.0
CCT_MAX = 15000.0
DEFAULT_CCT_RANGE = (2500.0, 9500.0)


class LightColor(NamedTuple):
    r: float
    g: float
    b: float

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.g, self.b], dtype=np.float64)


class SphericalPose(NamedTuple):
    r: float
    pan: float
    tilt: float

    def position(self) -> np.ndarray:
        return self.r * pan_tilt_to_unit(self.pan, self.tilt)


class DirectionEncoding(NamedTuple):
    sin_pan: float
    cos_pan: float
    sin_tilt: float
    cos_tilt: float


def wrap_deg(theta: float) -> float:
    """Wrap an angle in degrees to (-180, 180]."""
    w = math.fmod(theta, 360.0)
    if w > 180.0:
        w -= 360.0
    elif w <= -180.0:
        w += 360.0
    return w


def wrap_pan(theta: float) -> float:
    """Wrap an absolute pan to [0, 360)."""
    w = math.fmod(theta, 360.0)
    if w < 0.0:
        w += 360.0
    if w >= 360.0:
        w = 0.0
    return w


def encode_angle(delta: float) -> tuple[float, float]:
    rad = math.radians(wrap_deg(delta))
    return math.sin(rad), math.cos(rad)


def decode_angle(sin: float, cos: float) -> float:
    """Angle in (-180, 180] from a (possibly unnormalised) sin/cos pair."""
    if sin == 0.0 and cos == 0.0:
        raise ValueError("cannot decode angle from a (0, 0) sin/cos pair")
    deg = math.degrees(math.atan2(sin, cos))
    return 180.0 if deg <= -180.0 else deg


def encode_direction(delta_pan: float, delta_tilt: float) -> DirectionEncoding:
    sp, cp = encode_angle(delta_pan)
    st, ct = encode_angle(delta_tilt)
    return DirectionEncoding(sp, cp, st, ct)


def pan_tilt_to_unit(pan: float, tilt: float) -> np.ndarray:
    p = math.radians(pan)
    t = math.radians(tilt)
    ct = math.cos(t)
    return np.array([ct * math.sin(p), ct * math.cos(p), math.sin(t)])


def _vector_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    # atan2 of |a x b| and a.b stays accurate near 0 and 180 degrees
    cx = a[1] * b[2] - a[2] * b[1]
    cy = a[2] * b[0] - a[0] * b[2]
    cz = a[0] * b[1] - a[1] * b[0]
    cross = math.sqrt(cx * cx + cy * cy + cz * cz)
    dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
    return math.degrees(math.atan2(cross, dot))


def direction_error_deg(a: Sequence[float], b: Sequence[float]) -> float:
    """3D angle between the directions given by two (pan, tilt) pairs."""
    return _vector_angle_deg(pan_tilt_to_unit(*a), pan_tilt_to_unit(*b))


def angular_distance_deg(a: float, b: float) -> float:
    """Unsigned difference between two angles on the circle, in [0, 180]."""
    return abs(wrap_deg(a - b))


def rgb_angular_error_deg(a: Sequence[float], b: Sequence[float]) -> float:
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if not va.any() or not vb.any():
        raise ValueError("rgb angular error is undefined for a zero vector")
    return _vector_angle_deg(va, vb)


# XYZ -> linear sRGB (Rec. 709 primaries, D65 white)
XYZ_TO_RGB = np.array(
    [
        [3.2404542, -1.5371385, -0.4985314],
        [-0.9692660, 1.8760108, 0.0415560],
        [0.0556434, -0.2040259, 1.0572252],
    ]
)
RGB_TO_XYZ = np.linalg.inv(XYZ_TO_RGB)

_CMF = np.array(CMF_1931_5NM, dtype=np.float64)
_WAVELENGTHS_M = _CMF[:, 0] * 1e-9

# second radiation constant h*c/k in m*K
_C2 = 1.438776877e-2


def _blackbody_xyz(cct: float) -> np.ndarray:
    lam = _WAVELENGTHS_M
    # constant prefactor 2hc^2 drops out after normalisation
    radiance = lam**-5 / np.expm1(_C2 / (lam * cct))
    xyz = radiance @ _CMF[:, 1:]
    return xyz / xyz[1]


def _check_cct(cct: float) -> None:
    if not (CCT_MIN <= cct <= CCT_MAX):
        raise ValueError(f"cct {cct} K outside [{CCT_MIN:g}, {CCT_MAX:g}] K")


def _normalize_rgb(rgb: np.ndarray) -> LightColor:
    rgb = np.clip(rgb, 0.0, None)
    rgb = rgb / rgb.max()
    return LightColor(float(rgb[0]), float(rgb[1]), float(rgb[2]))


def planckian_rgb(cct: float) -> LightColor:
    """Linear sRGB colour of a blackbody at `cct` kelvin, max channel 1.

    Out-of-gamut (negative) channels are clipped to zero before normalising.
    """
    _check_cct(cct)
    return _normalize_rgb(XYZ_TO_RGB @ _blackbody_xyz(cct))


def _xyz_to_uv(xyz: np.ndarray) -> np.ndarray:
    x, y, z = xyz
    d = x + 15.0 * y + 3.0 * z
    return np.array([4.0 * x / d, 6.0 * y / d])


def _uv_to_xyz(uv: np.ndarray) -> np.ndarray:
    u, v = uv
    d = 2.0 * u - 8.0 * v + 4.0
    x = 3.0 * u / d
    y = 2.0 * v / d
    return np.array([x / y, 1.0, (1.0 - x - y) / y])


def planckian_uv(cct: float) -> np.ndarray:
    """CIE 1960 (u, v) chromaticity of a blackbody at `cct` kelvin."""
    return _xyz_to_uv(_blackbody_xyz(cct))


def rgb_to_uv(rgb: Sequence[float]) -> np.ndarray:
    """CIE 1960 (u, v) chromaticity of a linear sRGB colour."""
    return _xyz_to_uv(RGB_TO_XYZ @ np.asarray(rgb, dtype=np.float64))


def sample_near_planckian(
    rng: np.random.Generator,
    cct_range: tuple[float, float] = DEFAULT_CCT_RANGE,
    max_offset: float = 0.02,
) -> LightColor:
    """Random light colour within `max_offset` (CIE 1960 uv) of the Planckian locus.

    The offset is drawn uniformly from a disc around the locus point. When the
    offset colour falls outside the sRGB gamut the offset is halved until it
    fits, so the returned chromaticity is never clipped.
    """
    lo, hi = cct_range
    _check_cct(lo)
    _check_cct(hi)
    if lo > hi:
        raise ValueError(f"invalid cct range {cct_range}")
    cct = float(rng.uniform(lo, hi))
    angle = float(rng.uniform(0.0, 2.0 * math.pi))
    radius = max_offset * math.sqrt(float(rng.uniform()))
    if max_offset == 0.0:
        return planckian_rgb(cct)
    base = planckian_uv(cct)
    step = np.array([math.cos(angle), math.sin(angle)])
    for _ in range(32):
        rgb = XYZ_TO_RGB @ _uv_to_xyz(base + radius * step)
        if rgb.min() >= 0.0:
            return _normalize_rgb(rgb)
        radius *= 0.5
    return planckian_rgb(cct)
