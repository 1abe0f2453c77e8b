"""Per-sample angular errors, aggregate tables and stratification."""

from __future__ import annotations

import statistics
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import Manifest, ManifestRecord, load_png
from .lightmath import (
    angular_distance_deg,
    direction_error_deg,
    rgb_angular_error_deg,
    wrap_pan,
)

# (delta_pan, delta_tilt, colour) for each image in a uint8 [N, H, W, 3] batch
Predictor = Callable[[np.ndarray], Sequence[tuple[float, float, Sequence[float]]]]

COLUMNS = ("pan", "tilt", "direction", "color")
TILT_LEVELS = (("level 1 [30,50)", 30.0, 50.0), ("level 2 [50,70)", 50.0, 70.0), ("level 3 [70,90]", 70.0, 90.0))
PAN_QUADRANTS = ("front", "right", "back", "left")
PAN_TILT_FILTER = (30.0, 70.0)
SCHEMES = ("tilt", "pan", "frontback")


@dataclass(frozen=True)
class SampleError:
    index: int
    pan: float
    tilt: float
    direction: float
    color: float
    # context used by stratification
    delta_pan: float
    light_tilt: float | None


@dataclass
class EvalReport:
    samples: list[SampleError]

    def column(self, name: str) -> list[float]:
        return [getattr(s, name) for s in self.samples]

    def mean(self, name: str) -> float:
        return aggregate(self.column(name), "mean")

    def median(self, name: str) -> float:
        return aggregate(self.column(name), "median")

    def summary(self) -> dict[str, dict[str, float]]:
        return {c: {"mean": self.mean(c), "median": self.median(c)} for c in COLUMNS}


def aggregate(values: Sequence[float], stat: str = "mean") -> float:
    """Order-independent mean or median; NaN for an empty group."""
    vals = sorted(float(v) for v in values)
    if not vals:
        return float("nan")
    if stat == "median":
        return statistics.median(vals)
    if stat == "mean":
        return float(np.sum(vals) / len(vals))
    raise ValueError(f"unknown statistic {stat!r}")


def sample_error(index: int, pred, gt, light_tilt: float | None = None) -> SampleError:
    dp, dt, col = pred
    return SampleError(
        index=index,
        pan=angular_distance_deg(dp, gt.delta_pan),
        tilt=angular_distance_deg(dt, gt.delta_tilt),
        direction=direction_error_deg((dp, dt), (gt.delta_pan, gt.delta_tilt)),
        color=rgb_angular_error_deg(tuple(col), tuple(gt.color)),
        delta_pan=gt.delta_pan,
        light_tilt=light_tilt,
    )


def _light_tilt(rec: ManifestRecord) -> float | None:
    return rec.scene.light.pose.tilt if rec.scene is not None else None


def evaluate(
    predictor: Predictor,
    manifest: Manifest,
    split: str | None,
    root: str | Path,
    batch_size: int = 64,
) -> EvalReport:
    recs = manifest.records if split is None else manifest.split(split)
    if not recs:
        raise ValueError(f"split {split!r} is empty")
    root = Path(root)
    samples = []
    for s in range(0, len(recs), batch_size):
        chunk = recs[s : s + batch_size]
        imgs = np.stack([load_png(root / r.image) for r in chunk])
        preds = predictor(imgs)
        for rec, pred in zip(chunk, preds):
            samples.append(sample_error(rec.index, pred, rec.gt, _light_tilt(rec)))
    return EvalReport(samples)


def model_predictor(model) -> Predictor:
    from .estimator import normalize_images, predict_batch

    def run(images: np.ndarray):
        return [(e.delta_pan, e.delta_tilt, e.color) for e in predict_batch(model, normalize_images(images))]

    return run


def pan_quadrant(delta_pan: float) -> str:
    return PAN_QUADRANTS[int(wrap_pan(delta_pan + 45.0) // 90.0) % 4]


def tilt_level(light_tilt: float) -> int | None:
    """1, 2 or 3 for tilts in [30,50), [50,70), [70,90]; None outside."""
    for i, (_, lo, hi) in enumerate(TILT_LEVELS, start=1):
        if lo <= light_tilt < hi or (i == 3 and light_tilt == hi):
            return i
    return None


def front_or_back(delta_pan: float) -> str:
    return "front" if abs(delta_pan) <= 90.0 else "back"


def groups(report: EvalReport, scheme: str) -> dict[str, list[SampleError]]:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown stratification {scheme!r}; choose from {SCHEMES}")
    if scheme == "frontback":
        out: dict[str, list[SampleError]] = {"front": [], "back": []}
        for s in report.samples:
            out[front_or_back(s.delta_pan)].append(s)
        return out
    if any(s.light_tilt is None for s in report.samples):
        raise ValueError(f"{scheme} stratification needs the light tilt of every sample")
    if scheme == "tilt":
        out = {name: [] for name, _, _ in TILT_LEVELS}
        for s in report.samples:
            lvl = tilt_level(s.light_tilt)
            if lvl is not None:
                out[TILT_LEVELS[lvl - 1][0]].append(s)
        return out
    lo, hi = PAN_TILT_FILTER
    out = {q: [] for q in PAN_QUADRANTS}
    for s in report.samples:
        if lo <= s.light_tilt <= hi:
            out[pan_quadrant(s.delta_pan)].append(s)
    return out


@dataclass(frozen=True)
class TableRow:
    label: str
    count: int
    pan: float
    tilt: float
    direction: float
    color: float


def stratify(report: EvalReport, scheme: str, stat: str = "mean") -> list[TableRow]:
    rows = []
    for label, members in groups(report, scheme).items():
        vals = {c: aggregate([getattr(m, c) for m in members], stat) for c in COLUMNS}
        rows.append(TableRow(label, len(members), **vals))
    return rows


def overall_row(report: EvalReport, stat: str = "mean") -> TableRow:
    vals = {c: aggregate(report.column(c), stat) for c in COLUMNS}
    return TableRow("all", len(report.samples), **vals)


def format_table(rows: Sequence[TableRow], first_header: str = "Group") -> str:
    head = f"{first_header:<18}{'N':>6}{'Pan':>9}{'Tilt':>9}{'Direction':>11}{'Color':>9}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.label:<18}{r.count:>6}{r.pan:>9.2f}{r.tilt:>9.2f}{r.direction:>11.2f}{r.color:>9.2f}")
    return "\n".join(lines)
