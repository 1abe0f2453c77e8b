"""Deterministic CPU ray tracer with hard shadows from a single point light.

Everything is vectorised over rays with plain elementwise numpy arithmetic
(no BLAS reductions), so a pixel's value does not depend on how the image is
split into row blocks or how many worker threads render it.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from lumen.lightmath import pan_tilt_to_unit
from lumen.scenegen import CameraSpec, LightSpec, ObjectSpec, RoomSpec, SceneSpec, WallTexture

T_MIN = 1e-4
FALLOFF_REF = 35.0
AMBIENT = 0.03


@dataclass(frozen=True)
class Material:
    albedo: tuple[float, float, float]
    roughness: float = 0.0
    # (strength, exponent) of a Phong lobe
    specular: tuple[float, float] | None = None


class Ray(NamedTuple):
    origin: np.ndarray
    direction: np.ndarray


class Hit(NamedTuple):
    t: float
    point: np.ndarray
    normal: np.ndarray
    material: Material
    # unit vector from the hit point back toward the ray origin
    view: np.ndarray


@dataclass
class LinearImage:
    data: np.ndarray  # (height, width, 3) float64

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


# ---------------------------------------------------------------- vector helpers


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _normalize(v: np.ndarray) -> np.ndarray:
    return v / np.sqrt(_dot(v, v))[..., None]


def _cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.stack(
        [
            a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
            a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
            a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
        ],
        axis=-1,
    )


def _mat_apply(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """m @ v for a 3x3 matrix and (N, 3) vectors, written out componentwise."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    return np.stack(
        [
            m[0, 0] * x + m[0, 1] * y + m[0, 2] * z,
            m[1, 0] * x + m[1, 1] * y + m[1, 2] * z,
            m[2, 0] * x + m[2, 1] * y + m[2, 2] * z,
        ],
        axis=1,
    )


# ------------------------------------------------------------- canonical shapes
#
# Every primitive lives in a canonical frame inside the unit box
# [-0.5, 0.5]^2 x [0, 1]. Functions take ray origins/directions (N, 3) in that
# frame (directions need not be unit length) and return (t, normal) with
# t = inf on a miss.


def _pick(t: np.ndarray, n: np.ndarray, t2: np.ndarray, n2: np.ndarray):
    closer = t2 < t
    return np.where(closer, t2, t), np.where(closer[:, None], n2, n)


def _quadratic_roots(a, b, c):
    disc = b * b - 4.0 * a * c
    ok = disc >= 0.0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - sq) / (2.0 * a)
        t1 = (-b + sq) / (2.0 * a)
    lo = np.where(ok, np.minimum(t0, t1), np.inf)
    hi = np.where(ok, np.maximum(t0, t1), np.inf)
    return lo, hi


def _first_valid(lo, hi, valid_lo, valid_hi, tmin):
    lo_ok = valid_lo & (lo > tmin)
    hi_ok = valid_hi & (hi > tmin)
    return np.where(lo_ok, lo, np.where(hi_ok, hi, np.inf)), lo_ok


def _sphere(o, d, tmin, centre=(0.0, 0.0, 0.5), radius=0.5):
    c = np.asarray(centre)
    oc = o - c
    a = _dot(d, d)
    b = 2.0 * _dot(oc, d)
    cc = _dot(oc, oc) - radius * radius
    lo, hi = _quadratic_roots(a, b, cc)
    ones = np.ones_like(lo, dtype=bool)
    t, _ = _first_valid(lo, hi, ones, ones, tmin)
    tt = np.where(np.isfinite(t), t, 0.0)
    n = (o + tt[:, None] * d - c) / radius
    return t, n


def _box(o, d, tmin, lo=(-0.5, -0.5, 0.0), hi=(0.5, 0.5, 1.0)):
    lo = np.asarray(lo)
    hi = np.asarray(hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    t1 = np.minimum(ta, tb)
    t2 = np.maximum(ta, tb)
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tnear = np.max(t1, axis=1)
    tfar = np.min(t2, axis=1)
    hit = tnear <= tfar
    t, near_ok = _first_valid(tnear, tfar, hit, hit, tmin)
    axis_near = np.argmax(t1, axis=1)
    axis_far = np.argmin(t2, axis=1)
    axis = np.where(near_ok, axis_near, axis_far)
    n = np.zeros_like(o)
    rows = np.arange(o.shape[0])
    # sign chosen to point outward; facing is fixed up by the caller
    tt = np.where(np.isfinite(t), t, 0.0)
    p = o + tt[:, None] * d
    centre = 0.5 * (lo + hi)
    n[rows, axis] = np.sign(p[rows, axis] - centre[axis])
    n[rows, axis] = np.where(n[rows, axis] == 0.0, 1.0, n[rows, axis])
    return t, n


def _disc_z(o, d, tmin, z, radius, normal_z):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (z - o[:, 2]) / d[:, 2]
    px = o[:, 0] + t * d[:, 0]
    py = o[:, 1] + t * d[:, 1]
    ok = np.isfinite(t) & (t > tmin) & (px * px + py * py <= radius * radius)
    t = np.where(ok, t, np.inf)
    n = np.zeros_like(o)
    n[:, 2] = normal_z
    return t, n


def _cylinder(o, d, tmin, radius=0.5, z0=0.0, z1=1.0):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    lo, hi = _quadratic_roots(a, b, c)
    zlo = o[:, 2] + np.where(np.isfinite(lo), lo, 0.0) * d[:, 2]
    zhi = o[:, 2] + np.where(np.isfinite(hi), hi, 0.0) * d[:, 2]
    t, _ = _first_valid(lo, hi, (zlo >= z0) & (zlo <= z1), (zhi >= z0) & (zhi <= z1), tmin)
    tt = np.where(np.isfinite(t), t, 0.0)
    p = o + tt[:, None] * d
    n = np.stack([p[:, 0] / radius, p[:, 1] / radius, np.zeros_like(t)], axis=1)
    t, n = _pick(t, n, *_disc_z(o, d, tmin, z0, radius, -1.0))
    t, n = _pick(t, n, *_disc_z(o, d, tmin, z1, radius, 1.0))
    return t, n


def _cone(o, d, tmin, radius=0.5, z0=0.0, z1=1.0):
    # x^2 + y^2 = (k (z1 - z))^2 for z in [z0, z1]
    k = radius / (z1 - z0)
    w = z1 - o[:, 2]
    a = d[:, 0] ** 2 + d[:, 1] ** 2 - k * k * d[:, 2] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1] + k * k * w * d[:, 2])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - k * k * w * w
    lo, hi = _quadratic_roots(a, b, c)
    zlo = o[:, 2] + np.where(np.isfinite(lo), lo, 0.0) * d[:, 2]
    zhi = o[:, 2] + np.where(np.isfinite(hi), hi, 0.0) * d[:, 2]
    t, _ = _first_valid(lo, hi, (zlo >= z0) & (zlo <= z1), (zhi >= z0) & (zhi <= z1), tmin)
    tt = np.where(np.isfinite(t), t, 0.0)
    p = o + tt[:, None] * d
    rad = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2)
    n = np.stack([p[:, 0], p[:, 1], k * rad], axis=1)
    n = np.where((rad > 0)[:, None], n, np.array([0.0, 0.0, 1.0]))
    t, n = _pick(t, n, *_disc_z(o, d, tmin, z0, radius, -1.0))
    return t, n


def _capsule(o, d, tmin, radius=0.35):
    z0, z1 = radius, 1.0 - radius
    t, n = _cylinder_side(o, d, tmin, radius, z0, z1)
    t, n = _pick(t, n, *_sphere(o, d, tmin, (0.0, 0.0, z0), radius))
    t, n = _pick(t, n, *_sphere(o, d, tmin, (0.0, 0.0, z1), radius))
    return t, n


def _cylinder_side(o, d, tmin, radius, z0, z1):
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - radius * radius
    lo, hi = _quadratic_roots(a, b, c)
    zlo = o[:, 2] + np.where(np.isfinite(lo), lo, 0.0) * d[:, 2]
    zhi = o[:, 2] + np.where(np.isfinite(hi), hi, 0.0) * d[:, 2]
    t, _ = _first_valid(lo, hi, (zlo >= z0) & (zlo <= z1), (zhi >= z0) & (zhi <= z1), tmin)
    tt = np.where(np.isfinite(t), t, 0.0)
    p = o + tt[:, None] * d
    n = np.stack([p[:, 0], p[:, 1], np.zeros_like(t)], axis=1)
    return t, n


SHAPES = {
    "box": _box,
    "sphere": _sphere,
    "cylinder": _cylinder,
    "cone": _cone,
    "capsule": _capsule,
}

# sub-boxes (offset, scale) that composite parts occupy inside the unit box
COMPOSITE_LAYOUT = {
    "base": ((0.0, 0.0, 0.0), (1.0, 1.0, 0.55)),
    "top": ((0.0, 0.0, 0.55), (0.7, 0.7, 0.45)),
}


# ------------------------------------------------------------------ primitives


@dataclass
class Primitive:
    """A canonical shape under the affine map p_world = A p_canon + b."""

    shape: str
    A: np.ndarray
    b: np.ndarray
    material: Material
    A_inv: np.ndarray = field(init=False)
    # inverse transpose of A maps canonical normals to world normals
    N: np.ndarray = field(init=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        self.A_inv = np.linalg.inv(self.A)
        self.N = self.A_inv.T.copy()

    def intersect(self, o: np.ndarray, d: np.ndarray, tmin: float):
        lo = _mat_apply(self.A_inv, o - self.b)
        ld = _mat_apply(self.A_inv, d)
        t, n = SHAPES[self.shape](lo, ld, tmin)
        return t, _normalize(_mat_apply(self.N, n))


def make_sphere(centre: Sequence[float], radius: float, material: Material) -> Primitive:
    c = np.asarray(centre, dtype=np.float64)
    A = np.eye(3) * (2.0 * radius)
    return Primitive("sphere", A, c - np.array([0.0, 0.0, radius]), material)


def make_box(lo: Sequence[float], hi: Sequence[float], material: Material) -> Primitive:
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    size = hi - lo
    b = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), lo[2]])
    return Primitive("box", np.diag(size), b, material)


def object_primitives(obj: ObjectSpec) -> list[Primitive]:
    yaw = math.radians(obj.yaw)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    A = rot @ np.diag(obj.scale)
    b = np.asarray(obj.position, dtype=np.float64)
    mat = Material(tuple(obj.albedo), obj.roughness)
    if obj.kind != "composite":
        return [Primitive(obj.kind, A, b, mat)]
    prims = []
    for part, slot in zip(obj.parts, ("base", "top")):
        off, sc = COMPOSITE_LAYOUT[slot]
        prims.append(Primitive(part, A @ np.diag(sc), b + A @ np.asarray(off), mat))
    return prims


# ----------------------------------------------------------------------- room


def _hash_noise(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice values in [0, 1) from integer coordinates."""
    h = (ix.astype(np.int64) * 73856093) ^ (iy.astype(np.int64) * 19349663) ^ (seed * 83492791)
    h = h.astype(np.uint64)
    h ^= h >> np.uint64(13)
    h *= np.uint64(0x5BD1E995)
    h ^= h >> np.uint64(15)
    return (h & np.uint64(0xFFFF)).astype(np.float64) / 65536.0


def _value_noise(u: np.ndarray, v: np.ndarray, seed: int) -> np.ndarray:
    iu = np.floor(u)
    iv = np.floor(v)
    fu = u - iu
    fv = v - iv
    fu = fu * fu * (3.0 - 2.0 * fu)
    fv = fv * fv * (3.0 - 2.0 * fv)
    a = _hash_noise(iu, iv, seed)
    b = _hash_noise(iu + 1, iv, seed)
    c = _hash_noise(iu, iv + 1, seed)
    d = _hash_noise(iu + 1, iv + 1, seed)
    return (a * (1 - fu) + b * fu) * (1 - fv) + (c * (1 - fu) + d * fu) * fv


def texture_albedo(
    base: Sequence[float], tex: WallTexture, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """Albedo (N, 3) of a wall texture at wall coordinates (u along, v up)."""
    base = np.asarray(base, dtype=np.float64)
    out = np.broadcast_to(base, (u.shape[0], 3)).copy()
    if tex.tag == "checker":
        parity = (np.floor(u / tex.period) + np.floor(v / tex.period)) % 2 == 1
        out[parity] = np.asarray(tex.alt_albedo)
    elif tex.tag == "value-noise":
        n = _value_noise(u / tex.period, v / tex.period, tex.noise_seed)
        out = np.clip(out * (1.0 + tex.amplitude * (2.0 * n - 1.0))[:, None], 0.0, 1.0)
    return out


@dataclass
class Room:
    """Open-topped convex polygon room; walls are visible from inside only."""

    spec: RoomSpec
    normals: np.ndarray = field(init=False)  # outward wall normals (n, 3)
    tangents: np.ndarray = field(init=False)
    half_width: float = field(init=False)

    def __post_init__(self):
        n = self.spec.wall_count
        ang = np.radians(self.spec.rotation + 360.0 / n * np.arange(n))
        self.normals = np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], axis=1)
        self.tangents = np.stack([-np.sin(ang), np.cos(ang), np.zeros(n)], axis=1)
        self.half_width = self.spec.wall_distance * math.tan(math.pi / n)

    def inside_xy(self, p: np.ndarray, eps: float = 0.0) -> np.ndarray:
        ok = np.ones(p.shape[0], dtype=bool)
        for k in range(self.spec.wall_count):
            nk = self.normals[k]
            ok &= p[:, 0] * nk[0] + p[:, 1] * nk[1] <= self.spec.wall_distance + eps
        return ok


# ---------------------------------------------------------------- render scene


@dataclass
class PointLight:
    position: np.ndarray
    color: np.ndarray
    intensity: float


@dataclass
class Camera:
    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    fov: float


@dataclass
class RenderScene:
    primitives: list[Primitive]
    light: PointLight
    camera: Camera
    room: Room | None = None
    ambient: float = AMBIENT


def camera_from_spec(cam: CameraSpec) -> Camera:
    pos = cam.pose.r * pan_tilt_to_unit(cam.pose.pan, cam.pose.tilt)
    return look_at(pos, np.zeros(3), cam.fov)


def look_at(position: Sequence[float], target: Sequence[float], fov: float) -> Camera:
    pos = np.asarray(position, dtype=np.float64)
    fwd = _normalize(np.asarray(target, dtype=np.float64) - pos)
    right = _cross(fwd, np.array([0.0, 0.0, 1.0]))
    if _dot(right, right) < 1e-20:
        right = np.array([1.0, 0.0, 0.0])
    right = _normalize(right)
    up = _cross(right, fwd)
    return Camera(pos, fwd, right, up, fov)


def light_from_spec(light: LightSpec) -> PointLight:
    return PointLight(
        position=light.pose.r * pan_tilt_to_unit(light.pose.pan, light.pose.tilt),
        color=np.asarray(light.color, dtype=np.float64),
        intensity=float(light.intensity),
    )


def compile_scene(scene: SceneSpec, ambient: float = AMBIENT) -> RenderScene:
    prims: list[Primitive] = []
    for obj in scene.objects:
        prims.extend(object_primitives(obj))
    return RenderScene(
        primitives=prims,
        light=light_from_spec(scene.light),
        camera=camera_from_spec(scene.camera),
        room=Room(scene.room),
        ambient=ambient,
    )


def _as_render_scene(scene: SceneSpec | RenderScene) -> RenderScene:
    return scene if isinstance(scene, RenderScene) else compile_scene(scene)


# --------------------------------------------------------------------- tracing


@dataclass
class HitBuffer:
    t: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    spec_strength: np.ndarray
    spec_exponent: np.ndarray

    @property
    def hit(self) -> np.ndarray:
        return np.isfinite(self.t)


def _room_intersect(room: Room, o: np.ndarray, d: np.ndarray, tmin: float, tmax: np.ndarray | float):
    """Nearest floor or wall hit: (t, normal, albedo)."""
    n_rays = o.shape[0]
    best_t = np.full(n_rays, np.inf)
    best_n = np.zeros((n_rays, 3))
    best_a = np.zeros((n_rays, 3))

    # floor, seen from above only
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -o[:, 2] / d[:, 2]
    p = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    ok = (d[:, 2] < 0.0) & (o[:, 2] > 0.0) & (t > tmin) & (t < tmax) & room.inside_xy(p)
    best_t = np.where(ok, t, best_t)
    best_n[ok] = (0.0, 0.0, 1.0)
    best_a[ok] = room.spec.floor_albedo

    dist = room.spec.wall_distance
    for k in range(room.spec.wall_count):
        nk = room.normals[k]
        tk = room.tangents[k]
        dn = d[:, 0] * nk[0] + d[:, 1] * nk[1]
        on = o[:, 0] * nk[0] + o[:, 1] * nk[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (dist - on) / dn
        tt = np.where(np.isfinite(t), t, 0.0)
        p = o + tt[:, None] * d
        u = p[:, 0] * tk[0] + p[:, 1] * tk[1]
        ok = (
            (dn > 0.0)
            & (t > tmin)
            & (t < tmax)
            & (t < best_t)
            & (np.abs(u) <= room.half_width)
            & (p[:, 2] >= 0.0)
            & (p[:, 2] <= room.spec.wall_height)
        )
        if not ok.any():
            continue
        best_t = np.where(ok, t, best_t)
        best_n[ok] = -nk
        alb = texture_albedo(room.spec.wall_albedos[k], room.spec.wall_textures[k], u[ok], p[ok, 2])
        best_a[ok] = alb
    return best_t, best_n, best_a


def trace(scene: RenderScene, o: np.ndarray, d: np.ndarray, tmin: float = T_MIN) -> HitBuffer:
    """Nearest hit for each ray; normals face the ray origin."""
    n_rays = o.shape[0]
    if scene.room is not None:
        t, normal, albedo = _room_intersect(scene.room, o, d, tmin, np.inf)
    else:
        t = np.full(n_rays, np.inf)
        normal = np.zeros((n_rays, 3))
        albedo = np.zeros((n_rays, 3))
    rough = np.zeros(n_rays)
    ks = np.zeros(n_rays)
    ke = np.ones(n_rays)
    for prim in scene.primitives:
        tp, npr = prim.intersect(o, d, tmin)
        closer = tp < t
        if not closer.any():
            continue
        t = np.where(closer, tp, t)
        normal[closer] = npr[closer]
        albedo[closer] = prim.material.albedo
        rough[closer] = prim.material.roughness
        if prim.material.specular is not None:
            ks[closer] = prim.material.specular[0]
            ke[closer] = prim.material.specular[1]
        else:
            ks[closer] = 0.0
            ke[closer] = 1.0
    facing = _dot(normal, d) > 0.0
    normal[facing] = -normal[facing]
    return HitBuffer(t, normal, albedo, rough, ks, ke)


def occluded(scene: RenderScene, points: np.ndarray, light_pos: np.ndarray) -> np.ndarray:
    """True where the open segment from each point to the light hits geometry."""
    to_light = light_pos - points
    dist = np.sqrt(_dot(to_light, to_light))
    d = to_light / dist[:, None]
    blocked = np.zeros(points.shape[0], dtype=bool)
    if scene.room is not None:
        t, _, _ = _room_intersect(scene.room, points, d, T_MIN, dist)
        blocked |= np.isfinite(t)
    for prim in scene.primitives:
        tp, _ = prim.intersect(points, d, T_MIN)
        blocked |= tp < dist
    return blocked


def intersect(scene: SceneSpec | RenderScene, ray: Ray) -> Hit | None:
    """Nearest hit of a single ray, or None on a miss."""
    rs = _as_render_scene(scene)
    o = np.asarray(ray.origin, dtype=np.float64)[None, :]
    d = np.asarray(ray.direction, dtype=np.float64)[None, :]
    buf = trace(rs, o, d)
    if not buf.hit[0]:
        return None
    t = float(buf.t[0])
    spec = None
    if buf.spec_strength[0] > 0.0:
        spec = (float(buf.spec_strength[0]), float(buf.spec_exponent[0]))
    mat = Material(tuple(buf.albedo[0]), float(buf.roughness[0]), spec)
    return Hit(t, o[0] + t * d[0], buf.normal[0], mat, -d[0])


# --------------------------------------------------------------------- shading


def oren_nayar(n_dot_l, n_dot_v, l, v, n, sigma):
    """Oren-Nayar multiplier relative to Lambert (1 when sigma == 0)."""
    s2 = sigma * sigma
    A = 1.0 - 0.5 * s2 / (s2 + 0.33)
    B = 0.45 * s2 / (s2 + 0.09)
    cos_i = np.clip(n_dot_l, 0.0, 1.0)
    cos_r = np.clip(n_dot_v, 0.0, 1.0)
    sin_i = np.sqrt(1.0 - cos_i * cos_i)
    sin_r = np.sqrt(1.0 - cos_r * cos_r)
    # cos of the azimuth difference between l and v projected on the tangent plane
    lp = l - n_dot_l[..., None] * n
    vp = v - n_dot_v[..., None] * n
    denom = np.sqrt(_dot(lp, lp) * _dot(vp, vp))
    with np.errstate(divide="ignore", invalid="ignore"):
        cos_phi = np.where(denom > 1e-12, _dot(lp, vp) / denom, 0.0)
    # sin(alpha) tan(beta) with alpha = max(theta_i, theta_r), beta = min(...)
    i_larger = cos_i < cos_r
    sin_alpha = np.where(i_larger, sin_i, sin_r)
    cos_beta = np.where(i_larger, cos_r, cos_i)
    sin_beta = np.where(i_larger, sin_r, sin_i)
    with np.errstate(divide="ignore", invalid="ignore"):
        tan_beta = np.where(cos_beta > 1e-12, sin_beta / cos_beta, 0.0)
    return A + B * np.maximum(0.0, cos_phi) * sin_alpha * tan_beta


def falloff(distance):
    return (FALLOFF_REF / distance) ** 2


def _shade(scene: RenderScene, buf: HitBuffer, o: np.ndarray, d: np.ndarray):
    """(radiance, direct, visible) for every ray; misses are black."""
    n_rays = o.shape[0]
    radiance = np.zeros((n_rays, 3))
    direct = np.zeros((n_rays, 3))
    visible = np.zeros(n_rays, dtype=bool)
    hit = buf.hit
    if not hit.any():
        return radiance, direct, visible
    idx = np.nonzero(hit)[0]
    t = buf.t[idx]
    p = o[idx] + t[:, None] * d[idx]
    n = buf.normal[idx]
    albedo = buf.albedo[idx]
    light = scene.light

    to_light = light.position - p
    dist = np.sqrt(_dot(to_light, to_light))
    l = to_light / dist[:, None]
    v = -d[idx] / np.sqrt(_dot(d[idx], d[idx]))[:, None]
    n_dot_l = _dot(n, l)
    n_dot_v = _dot(n, v)
    lit = n_dot_l > 0.0
    vis = lit.copy()
    if lit.any():
        sub = np.nonzero(lit)[0]
        vis[sub] = ~occluded(scene, p[sub], light.position)
    scale = light.intensity * falloff(dist) * np.maximum(n_dot_l, 0.0) / math.pi
    diffuse = albedo * (oren_nayar(n_dot_l, n_dot_v, l, v, n, buf.roughness[idx]) * scale)[:, None]
    r = 2.0 * n_dot_l[:, None] * n - l
    rv = np.maximum(_dot(r, v), 0.0)
    ks = buf.spec_strength[idx]
    spec = np.where(ks > 0.0, ks * rv ** buf.spec_exponent[idx] * scale, 0.0)
    term = (diffuse + spec[:, None]) * light.color
    term[~vis] = 0.0
    direct[idx] = term
    visible[idx] = vis
    radiance[idx] = term + scene.ambient * albedo
    return radiance, direct, visible


def shade_direct(hit: Hit, light: LightSpec | PointLight, scene: SceneSpec | RenderScene) -> np.ndarray:
    """Direct (shadowed) radiance at a single hit, without ambient."""
    rs = _as_render_scene(scene)
    if isinstance(light, LightSpec):
        light = light_from_spec(light)
    rs = RenderScene(rs.primitives, light, rs.camera, rs.room, rs.ambient)
    spec = hit.material.specular
    buf = HitBuffer(
        t=np.array([1.0]),
        normal=np.asarray(hit.normal, dtype=np.float64)[None, :],
        albedo=np.asarray(hit.material.albedo, dtype=np.float64)[None, :],
        roughness=np.array([hit.material.roughness]),
        spec_strength=np.array([spec[0] if spec else 0.0]),
        spec_exponent=np.array([spec[1] if spec else 1.0]),
    )
    # reconstruct a ray that arrives at the hit point along -view
    d = -np.asarray(hit.view, dtype=np.float64)[None, :]
    o = np.asarray(hit.point, dtype=np.float64)[None, :] - d
    _, direct, _ = _shade(rs, buf, o, d)
    return direct[0]


# ---------------------------------------------------------------------- camera


def camera_rays(cam: Camera, px: np.ndarray, py: np.ndarray, w: int, h: int):
    """Pinhole rays through pixel coordinates (pixel centres at integer + 0.5)."""
    th = math.tan(math.radians(cam.fov) / 2.0)
    tw = th * w / h
    x = (2.0 * (px + 0.5) / w - 1.0) * tw
    y = (1.0 - 2.0 * (py + 0.5) / h) * th
    d = cam.forward + x[:, None] * cam.right + y[:, None] * cam.up
    d = _normalize(d)
    o = np.broadcast_to(cam.position, d.shape).copy()
    return o, d


def camera_ray(camera: CameraSpec | Camera, px: float, py: float, w: int, h: int) -> Ray:
    if not (px < w and py < h):
        raise ValueError(f"pixel ({px}, {py}) outside a {w}x{h} image")
    cam = camera if isinstance(camera, Camera) else camera_from_spec(camera)
    o, d = camera_rays(cam, np.array([float(px)]), np.array([float(py)]), w, h)
    return Ray(o[0], d[0])


# ---------------------------------------------------------------------- render


@dataclass
class RenderBuffers:
    """Per-pixel intermediate results, for tests and diagnostics."""

    radiance: np.ndarray
    direct: np.ndarray
    visible: np.ndarray
    hit: np.ndarray
    t: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray


def worker_count() -> int:
    env = os.environ.get("LUMEN_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


_SUBPIXEL = {1: [(0.0, 0.0)], 4: [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)]}


def _render_rows(rs: RenderScene, y0: int, y1: int, w: int, h: int, spp: int):
    ys, xs = np.mgrid[y0:y1, 0:w]
    xs = xs.ravel().astype(np.float64)
    ys = ys.ravel().astype(np.float64)
    acc = None
    for dx, dy in _SUBPIXEL[spp]:
        o, d = camera_rays(rs.camera, xs + dx, ys + dy, w, h)
        buf = trace(rs, o, d)
        radiance, direct, visible = _shade(rs, buf, o, d)
        if acc is None:
            acc = [radiance, direct, visible, buf.hit, buf.t, buf.normal, buf.albedo]
        else:
            acc[0] = acc[0] + radiance
            acc[1] = acc[1] + direct
    if spp > 1:
        acc[0] = acc[0] / spp
        acc[1] = acc[1] / spp
    return acc


def render_buffers(
    scene: SceneSpec | RenderScene, w: int, h: int, spp: int = 1, threads: int | None = None
) -> RenderBuffers:
    if w < 16 or h < 16:
        raise ValueError(f"image must be at least 16x16, got {w}x{h}")
    if spp not in _SUBPIXEL:
        raise ValueError("samples per pixel must be 1 or 4")
    rs = _as_render_scene(scene)
    threads = threads or worker_count()
    block = max(1, min(16, h // threads or 1))
    bounds = [(y, min(h, y + block)) for y in range(0, h, block)]
    if threads == 1:
        parts = [_render_rows(rs, a, b, w, h, spp) for a, b in bounds]
    else:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda ab: _render_rows(rs, ab[0], ab[1], w, h, spp), bounds))
    cols = [np.concatenate([p[i] for p in parts]) for i in range(7)]
    shape3 = (h, w, 3)
    return RenderBuffers(
        radiance=cols[0].reshape(shape3),
        direct=cols[1].reshape(shape3),
        visible=cols[2].reshape(h, w),
        hit=cols[3].reshape(h, w),
        t=cols[4].reshape(h, w),
        normal=cols[5].reshape(shape3),
        albedo=cols[6].reshape(shape3),
    )


def render(scene: SceneSpec | RenderScene, w: int, h: int, spp: int = 1, threads: int | None = None) -> LinearImage:
    return LinearImage(render_buffers(scene, w, h, spp, threads).radiance)


def tonemap_encode(img: LinearImage | np.ndarray) -> np.ndarray:
    """Clamp, gamma 1/2.2 and round half up to uint8."""
    data = img.data if isinstance(img, LinearImage) else np.asarray(img)
    x = np.clip(data, 0.0, 1.0) ** (1.0 / 2.2)
    return np.floor(255.0 * x + 0.5).astype(np.uint8)
