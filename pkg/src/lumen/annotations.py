"""Probe annotation files.

Line-delimited JSON. The first line is a header
``{"format": "lumen-annotations", "version": 1}``; every following line
describes one photograph::

    {"image": "scene3/img_0007.png", "reference": "scene3/ref.png",
     "specular": {"cx": 512.4, "cy": 300.0, "radius": 41.5},
     "diffuse": {"cx": 610.2, "cy": 302.1, "radius": 40.8}}

Paths are relative to the annotation file. ``reference`` names the scene's
reference image (light aligned with the camera) and may be null, in which
case no correction is applied.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .probe import CircleAnnotation

FORMAT = "lumen-annotations"
VERSION = 1


@dataclass(frozen=True)
class AnnotationRecord:
    image: str
    specular: CircleAnnotation
    diffuse: CircleAnnotation
    reference: str | None = None

    def to_dict(self) -> dict:
        def circ(c: CircleAnnotation) -> dict:
            return {"cx": c.cx, "cy": c.cy, "radius": c.radius}

        return {
            "image": self.image,
            "reference": self.reference,
            "specular": circ(self.specular),
            "diffuse": circ(self.diffuse),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnnotationRecord":
        def circ(c: dict, kind: str) -> CircleAnnotation:
            return CircleAnnotation(float(c["cx"]), float(c["cy"]), float(c["radius"]), kind)

        return cls(
            image=d["image"],
            specular=circ(d["specular"], "specular"),
            diffuse=circ(d["diffuse"], "diffuse"),
            reference=d.get("reference"),
        )


def write_annotations(path: str | Path, records: Iterable[AnnotationRecord]) -> None:
    lines = [json.dumps({"format": FORMAT, "version": VERSION}, sort_keys=True)]
    lines += [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    text = Path(path).read_text(encoding="utf-8")
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty annotation file")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ValueError(f"{path}: expected {FORMAT} version {VERSION}")
    return [AnnotationRecord.from_dict(json.loads(ln)) for ln in lines[1:]]
