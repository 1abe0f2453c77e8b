"""Dataset generation and the line-delimited JSON manifest."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .lightmath import LightColor
from .renderer import compile_scene, render, tonemap_encode
from .scenegen import (
    LightGT,
    SceneConfig,
    SceneSpec,
    derive_seed,
    gt_from_scene,
    sample_scene,
    validate_scene,
)

MANIFEST_NAME = "manifest.jsonl"
MANIFEST_FORMAT = "lumen-manifest"
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    n: int = 2500
    seed: int = 0
    size: int = 64
    spp: int = 1
    single_object: bool = False
    split_fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def scene_config(self) -> SceneConfig:
        return SceneConfig.single_object() if self.single_object else SceneConfig()


@dataclass(frozen=True)
class ManifestRecord:
    index: int
    image: str
    split: str
    gt: LightGT
    scene: SceneSpec | None = None
    # probe records reference an annotation instead of a scene
    annotation: str | None = None

    def to_dict(self) -> dict:
        d = {
            "index": self.index,
            "image": self.image,
            "split": self.split,
            "gt": {
                "delta_pan": self.gt.delta_pan,
                "delta_tilt": self.gt.delta_tilt,
                "color": list(self.gt.color),
            },
        }
        if self.scene is not None:
            d["scene"] = self.scene.to_dict()
        if self.annotation is not None:
            d["annotation"] = self.annotation
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        g = d["gt"]
        return cls(
            index=int(d["index"]),
            image=d["image"],
            split=d["split"],
            gt=LightGT(float(g["delta_pan"]), float(g["delta_tilt"]), LightColor(*map(float, g["color"]))),
            scene=SceneSpec.from_dict(d["scene"]) if "scene" in d else None,
            annotation=d.get("annotation"),
        )


@dataclass
class Manifest:
    records: list[ManifestRecord]
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]


def split_for(seed: int, index: int, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> str:
    """Stable split tag from a hash of (seed, index)."""
    digest = hashlib.sha256(f"lumen-split:{seed}:{index}".encode()).digest()
    u = int.from_bytes(digest[:8], "little") / 2.0**64
    acc = 0.0
    for name, frac in zip(SPLITS, fractions):
        acc += frac
        if u < acc:
            return name
    return SPLITS[-1]


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(path: str | Path, records: Iterable[ManifestRecord], meta: dict | None = None) -> None:
    header = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, **(meta or {})}
    lines = [_dumps(header)] + [_dumps(r.to_dict()) for r in records]
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write manifest {path}: {exc}") from exc


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise DatasetError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: not a lumen manifest")
    if header.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {header.get('version')}")
    meta = {k: v for k, v in header.items() if k not in ("format", "version")}
    return Manifest([ManifestRecord.from_dict(json.loads(ln)) for ln in lines[1:]], meta)


def render_scene_image(scene: SceneSpec, size: int, spp: int = 1, threads: int | None = None) -> np.ndarray:
    return tonemap_encode(render(compile_scene(scene), size, size, spp, threads))


def save_png(path: Path, image: np.ndarray) -> None:
    try:
        Image.fromarray(image, mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise DatasetError(f"cannot write image {path}: {exc}") from exc


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def generate_dataset(cfg: DatasetConfig, out_dir: str | Path, threads: int | None = None, progress=None) -> Manifest:
    """Sample, render and write ``cfg.n`` scenes plus a manifest to ``out_dir``."""
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {img_dir}: {exc}") from exc
    scfg = cfg.scene_config()
    width = max(5, len(str(max(cfg.n - 1, 0))))
    records = []
    for i in range(cfg.n):
        scene = sample_scene(derive_seed(cfg.seed, i), scfg)
        problems = validate_scene(scene, scfg)
        if problems:
            raise DatasetError(f"scene {i} violates constraints: {problems}")
        rel = f"images/{i:0{width}d}.png"
        save_png(out / rel, render_scene_image(scene, cfg.size, cfg.spp, threads))
        records.append(ManifestRecord(i, rel, split_for(cfg.seed, i, cfg.split_fractions), gt_from_scene(scene), scene))
        if progress is not None:
            progress(i + 1, cfg.n)
    meta = {
        "seed": cfg.seed,
        "n": cfg.n,
        "size": cfg.size,
        "spp": cfg.spp,
        "mode": "single-object" if cfg.single_object else "multi-object",
    }
    manifest = Manifest(records, meta)
    write_manifest(out / MANIFEST_NAME, records, meta)
    return manifest


def load_split(manifest: Manifest, root: str | Path, split: str | None) -> tuple[np.ndarray, list[ManifestRecord]]:
    """uint8 [N, H, W, 3] images and their records for one split (all when None)."""
    root = Path(root)
    recs = manifest.records if split is None else manifest.split(split)
    if not recs:
        return np.zeros((0, 0, 0, 3), dtype=np.uint8), []
    return np.stack([load_png(root / r.image) for r in recs]), recs


def check_record(record: ManifestRecord, root: str | Path, size: int | None = None) -> list[str]:
    """Problems with a record: missing/odd image, or GT that disagrees with its scene."""
    problems = []
    path = Path(root) / record.image
    if not path.exists():
        return [f"missing image {path}"]
    img = load_png(path)
    if size is not None and img.shape[:2] != (size, size):
        problems.append(f"image {path} is {img.shape[1]}x{img.shape[0]}, expected {size}x{size}")
    if record.scene is not None:
        problems.extend(validate_scene(record.scene))
        gt = gt_from_scene(record.scene)
        diffs = [gt.delta_pan - record.gt.delta_pan, gt.delta_tilt - record.gt.delta_tilt]
        diffs += [a - b for a, b in zip(gt.color, record.gt.color)]
        if max(abs(d) for d in diffs) > 1e-9 or not all(math.isfinite(d) for d in diffs):
            problems.append("stored GT does not match the scene")
    return problems
