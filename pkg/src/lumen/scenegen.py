"""Random parametric scenes with a single point light and their ground truth.

A scene is a handful of primitive objects standing on the floor of an open
polygonal room, lit by one point light placed on a hemisphere around the
room centre and viewed by a camera looking at the centre.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Any

import numpy as np

from lumen.lightmath import (
    DEFAULT_CCT_RANGE,
    LightColor,
    SphericalPose,
    sample_near_planckian,
    wrap_deg,
)

PRIMITIVES = ("box", "sphere", "cylinder", "cone", "capsule", "composite")
COMPOSITE_BASES = ("box", "cylinder")
COMPOSITE_TOPS = ("sphere", "cone")
TEXTURES = ("flat", "checker", "value-noise")

LIGHT_TILTS = tuple(range(30, 91, 5))
CAMERA_RADIUS = 20.0
CAMERA_FOV = 50.0
EXCLUSION_RADIUS = 0.5
MAX_PLACEMENT_ATTEMPTS = 1000


class PlacementError(RuntimeError):
    """Raised when objects cannot be placed within the rejection budget."""


@dataclass(frozen=True)
class ObjectSpec:
    kind: str
    position: tuple[float, float, float]
    scale: tuple[float, float, float]
    yaw: float
    albedo: tuple[float, float, float]
    roughness: float
    # (base, top) primitive kinds for composites, empty otherwise
    parts: tuple[str, ...] = ()

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        """Centre and radius of a sphere enclosing the object's local unit box."""
        x, y, z = self.position
        sx, sy, sz = self.scale
        centre = np.array([x, y, z + 0.5 * sz])
        return centre, 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)


@dataclass(frozen=True)
class WallTexture:
    tag: str = "flat"
    # checker: period (m) and alternate albedo; value-noise: cell (m), amplitude, seed
    period: float = 1.0
    alt_albedo: tuple[float, float, float] = (0.5, 0.5, 0.5)
    amplitude: float = 0.0
    noise_seed: int = 0


@dataclass(frozen=True)
class RoomSpec:
    wall_count: int
    wall_distance: float
    wall_height: float
    rotation: float
    floor_albedo: tuple[float, float, float]
    wall_albedos: tuple[tuple[float, float, float], ...]
    wall_textures: tuple[WallTexture, ...]


@dataclass(frozen=True)
class LightSpec:
    pose: SphericalPose
    color: LightColor
    intensity: float


@dataclass(frozen=True)
class CameraSpec:
    pose: SphericalPose
    fov: float = CAMERA_FOV


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    objects: tuple[ObjectSpec, ...]
    room: RoomSpec
    light: LightSpec
    camera: CameraSpec

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SceneSpec":
        room = d["room"]
        return cls(
            seed=int(d["seed"]),
            objects=tuple(
                ObjectSpec(
                    kind=o["kind"],
                    position=tuple(o["position"]),
                    scale=tuple(o["scale"]),
                    yaw=o["yaw"],
                    albedo=tuple(o["albedo"]),
                    roughness=o["roughness"],
                    parts=tuple(o.get("parts", ())),
                )
                for o in d["objects"]
            ),
            room=RoomSpec(
                wall_count=int(room["wall_count"]),
                wall_distance=room["wall_distance"],
                wall_height=room["wall_height"],
                rotation=room["rotation"],
                floor_albedo=tuple(room["floor_albedo"]),
                wall_albedos=tuple(tuple(a) for a in room["wall_albedos"]),
                wall_textures=tuple(
                    WallTexture(
                        tag=t["tag"],
                        period=t["period"],
                        alt_albedo=tuple(t["alt_albedo"]),
                        amplitude=t["amplitude"],
                        noise_seed=int(t["noise_seed"]),
                    )
                    for t in room["wall_textures"]
                ),
            ),
            light=LightSpec(
                pose=SphericalPose(*d["light"]["pose"]),
                color=LightColor(*d["light"]["color"]),
                intensity=d["light"]["intensity"],
            ),
            camera=CameraSpec(
                pose=SphericalPose(*d["camera"]["pose"]),
                fov=d["camera"]["fov"],
            ),
        )


@dataclass(frozen=True)
class LightGT:
    delta_pan: float
    delta_tilt: float
    color: LightColor


@dataclass(frozen=True)
class SceneConfig:
    """Sampling ranges. Defaults give the multi-object dataset."""

    object_count: tuple[int, int] = (1, 3)
    cct_range: tuple[float, float] = DEFAULT_CCT_RANGE
    max_chroma_offset: float = 0.02
    scale_range: tuple[float, float] = (1.0, 4.0)
    albedo_range: tuple[float, float] = (0.05, 0.95)
    roughness_range: tuple[float, float] = (0.0, 0.5)
    placement_radius: float = 6.0
    exclusion_radius: float = EXCLUSION_RADIUS
    wall_counts: tuple[int, ...] = (4, 5, 6)
    wall_distance_range: tuple[float, float] = (10.0, 14.0)
    wall_height_range: tuple[float, float] = (2.0, 4.0)
    floor_albedo_range: tuple[float, float] = (0.3, 0.6)
    light_radius_range: tuple[float, float] = (20.0, 50.0)
    intensity_range: tuple[float, float] = (0.5, 4.0)
    camera_tilt_range: tuple[float, float] = (10.0, 70.0)
    camera_fov: float = CAMERA_FOV

    @classmethod
    def single_object(cls, **kw: Any) -> "SceneConfig":
        return cls(object_count=(1, 1), **kw)


def derive_seed(dataset_seed: int, index: int) -> int:
    """Independent 64-bit seed for scene `index` of a dataset."""
    ss = np.random.SeedSequence([dataset_seed, index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _rgb(rng: np.random.Generator, lo: float, hi: float) -> tuple[float, float, float]:
    a = rng.uniform(lo, hi, 3)
    return (float(a[0]), float(a[1]), float(a[2]))


def _sample_object(rng: np.random.Generator, cfg: SceneConfig) -> ObjectSpec:
    kind = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
    parts: tuple[str, ...] = ()
    if kind == "composite":
        parts = (
            COMPOSITE_BASES[int(rng.integers(len(COMPOSITE_BASES)))],
            COMPOSITE_TOPS[int(rng.integers(len(COMPOSITE_TOPS)))],
        )
    lo, hi = cfg.scale_range
    scale = _rgb(rng, lo, hi)
    rho = cfg.placement_radius * math.sqrt(float(rng.uniform()))
    psi = float(rng.uniform(0.0, 2.0 * math.pi))
    return ObjectSpec(
        kind=kind,
        position=(rho * math.cos(psi), rho * math.sin(psi), 0.0),
        scale=scale,
        yaw=float(rng.uniform(0.0, 360.0)),
        albedo=_rgb(rng, *cfg.albedo_range),
        roughness=float(rng.uniform(*cfg.roughness_range)),
        parts=parts,
    )


def _object_fits(obj: ObjectSpec, placed: list[ObjectSpec], cfg: SceneConfig, apothem: float) -> bool:
    c, r = obj.bounding_sphere()
    if np.linalg.norm(c) <= r + cfg.exclusion_radius:
        return False
    if math.hypot(c[0], c[1]) + r >= apothem:
        return False
    for other in placed:
        oc, orad = other.bounding_sphere()
        if np.linalg.norm(c - oc) <= r + orad:
            return False
    return True


def _sample_texture(rng: np.random.Generator, cfg: SceneConfig) -> WallTexture:
    tag = TEXTURES[int(rng.integers(len(TEXTURES)))]
    if tag == "checker":
        return WallTexture(
            tag=tag,
            period=float(rng.uniform(0.5, 2.0)),
            alt_albedo=_rgb(rng, *cfg.albedo_range),
        )
    if tag == "value-noise":
        return WallTexture(
            tag=tag,
            period=float(rng.uniform(0.3, 1.5)),
            amplitude=float(rng.uniform(0.1, 0.5)),
            noise_seed=int(rng.integers(2**31)),
        )
    return WallTexture()


def _sample_room(rng: np.random.Generator, cfg: SceneConfig) -> RoomSpec:
    n = int(cfg.wall_counts[int(rng.integers(len(cfg.wall_counts)))])
    return RoomSpec(
        wall_count=n,
        wall_distance=float(rng.uniform(*cfg.wall_distance_range)),
        wall_height=float(rng.uniform(*cfg.wall_height_range)),
        rotation=float(rng.uniform(0.0, 360.0 / n)),
        floor_albedo=_rgb(rng, *cfg.floor_albedo_range),
        wall_albedos=tuple(_rgb(rng, *cfg.albedo_range) for _ in range(n)),
        wall_textures=tuple(_sample_texture(rng, cfg) for _ in range(n)),
    )


def sample_scene(seed: int, config: SceneConfig | None = None) -> SceneSpec:
    """Draw one scene from `config` using a generator seeded with `seed`."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    lo, hi = cfg.object_count
    count = int(rng.integers(lo, hi + 1))
    room = _sample_room(rng, cfg)

    placed: list[ObjectSpec] = []
    attempts = 0
    while len(placed) < count:
        if attempts >= MAX_PLACEMENT_ATTEMPTS:
            raise PlacementError(
                f"placed {len(placed)}/{count} objects after {attempts} attempts"
            )
        attempts += 1
        obj = _sample_object(rng, cfg)
        if _object_fits(obj, placed, cfg, room.wall_distance):
            placed.append(obj)

    light = LightSpec(
        pose=SphericalPose(
            r=float(rng.uniform(*cfg.light_radius_range)),
            pan=float(rng.integers(0, 360)),
            tilt=float(LIGHT_TILTS[int(rng.integers(len(LIGHT_TILTS)))]),
        ),
        color=sample_near_planckian(rng, cfg.cct_range, cfg.max_chroma_offset),
        intensity=float(math.exp(rng.uniform(*np.log(cfg.intensity_range)))),
    )
    camera = CameraSpec(
        pose=SphericalPose(CAMERA_RADIUS, 0.0, float(rng.uniform(*cfg.camera_tilt_range))),
        fov=cfg.camera_fov,
    )
    return SceneSpec(seed=int(seed), objects=tuple(placed), room=room, light=light, camera=camera)


def gt_from_scene(scene: SceneSpec) -> LightGT:
    cam, light = scene.camera.pose, scene.light.pose
    return LightGT(
        delta_pan=wrap_deg(cam.pan - light.pan),
        delta_tilt=wrap_deg(cam.tilt - light.tilt),
        color=scene.light.color,
    )


def _in_range(v: float, lo: float, hi: float) -> bool:
    return lo <= v <= hi


def validate_scene(scene: SceneSpec, config: SceneConfig | None = None) -> list[str]:
    """Names of every broken scene constraint; empty when the scene is valid."""
    cfg = config or SceneConfig()
    out: list[str] = []
    objs = scene.objects
    if not 1 <= len(objs) <= 3:
        out.append(f"object count: {len(objs)} not in [1, 3]")

    room = scene.room
    if room.wall_count not in (4, 5, 6):
        out.append(f"wall count: {room.wall_count}")
    if len(room.wall_albedos) != room.wall_count or len(room.wall_textures) != room.wall_count:
        out.append("wall attributes: per-wall albedo/texture count mismatch")
    for t in room.wall_textures:
        if t.tag not in TEXTURES:
            out.append(f"wall texture: unknown tag {t.tag!r}")
    if room.wall_distance <= cfg.exclusion_radius or room.wall_height <= 0:
        out.append("room size: walls must enclose the origin")

    for i, o in enumerate(objs):
        tag = f"object {i}"
        if o.kind not in PRIMITIVES:
            out.append(f"object kind: {tag} has unknown kind {o.kind!r}")
        if o.kind == "composite" and (
            len(o.parts) != 2 or o.parts[0] not in COMPOSITE_BASES or o.parts[1] not in COMPOSITE_TOPS
        ):
            out.append(f"object kind: {tag} composite parts {o.parts}")
        if any(not _in_range(s, *cfg.scale_range) for s in o.scale):
            out.append(f"object scale range: {tag} scale {o.scale}")
        if abs(o.position[2]) > 1e-9:
            out.append(f"floor contact: {tag} lowest point at z={o.position[2]}")
        if any(not _in_range(a, 0.05, 0.95) for a in o.albedo):
            out.append(f"albedo range: {tag} albedo {o.albedo}")
        if not _in_range(o.roughness, 0.0, 1.0):
            out.append(f"roughness range: {tag} roughness {o.roughness}")
        c, r = o.bounding_sphere()
        if np.linalg.norm(c) <= r + cfg.exclusion_radius:
            out.append(f"exclusion zone: {tag} intrudes on the empty centre")
        if math.hypot(c[0], c[1]) + r >= room.wall_distance:
            out.append(f"object outside room: {tag}")
        for j in range(i + 1, len(objs)):
            oc, orad = objs[j].bounding_sphere()
            if np.linalg.norm(c - oc) <= r + orad:
                out.append(f"object overlap: objects {i} and {j}")

    lp = scene.light.pose
    if not _in_range(lp.r, 20.0, 50.0):
        out.append(f"light radius range: r={lp.r}")
    if lp.tilt not in LIGHT_TILTS:
        out.append(f"light tilt grid: tilt={lp.tilt}")
    if not (float(lp.pan).is_integer() and 0 <= lp.pan < 360):
        out.append(f"light pan grid: pan={lp.pan}")
    col = scene.light.color
    if min(col) < 0 or max(col) <= 0:
        out.append(f"light color: {tuple(col)}")
    if not scene.light.intensity > 0:
        out.append(f"light intensity: {scene.light.intensity}")

    cp = scene.camera.pose
    if cp.r != CAMERA_RADIUS:
        out.append(f"camera radius: r={cp.r}")
    if cp.pan != 0.0:
        out.append(f"camera pan: pan={cp.pan}")
    if not _in_range(cp.tilt, 10.0, 70.0):
        out.append(f"camera tilt range: tilt={cp.tilt}")
    return out
