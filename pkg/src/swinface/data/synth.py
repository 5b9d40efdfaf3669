"""Deterministic procedural faces standing in for the licensed corpora.

Every visual factor is drawn so that a horizontal flip maps the image onto a
valid image with the same labels.

* identity   -> 4x4 colour-grid texture hashed from the identity id
* expression -> one of 7 flip-symmetric white glyphs in the centre
* age        -> brightness ramp towards the bottom, stronger with age
* attribute j -> a pair of small black squares mirrored about the vertical axis
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional

import cv2
import numpy as np
from PIL import Image

from .align import TEMPLATE
from .manifest import NUM_ATTRIBUTES, ManifestRecord, write_manifest

SIZE = 112
MALE = 20
_DISTRACTOR_BASE = 1_000_000


@dataclass(frozen=True)
class SynthSpec:
    identities: int = 16
    images_per_identity: int = 6
    expression: int = 70
    age_gender: int = 64
    attribute: int = 64
    seed: int = 0
    unknown_rate: float = 0.05

    @property
    def total(self) -> int:
        return self.identities * self.images_per_identity + self.expression + self.age_gender + self.attribute


SPECS = {
    "tiny": SynthSpec(),
    "example": SynthSpec(identities=8, images_per_identity=4, expression=70, age_gender=64, attribute=64),
    "micro": SynthSpec(identities=4, images_per_identity=2, expression=7, age_gender=4, attribute=4),
}


def _glyph_cells() -> np.ndarray:
    """40 (row, col) cells on an 11x11 grid of 10px cells, left half + centre
    column, outside the central expression area."""
    cells = [(r, c) for r in range(11) for c in range(6)
             if not (3 <= r <= 7 and 3 <= c <= 7)]
    pick = np.linspace(0, len(cells) - 1, NUM_ATTRIBUTES).round().astype(int)
    return np.array([cells[i] for i in pick])


GLYPH_CELLS = _glyph_cells()


def identity_texture(identity: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7, identity])
    colors = rng.integers(40, 216, size=(4, 4, 3), dtype=np.int64).astype(np.uint8)
    return np.repeat(np.repeat(colors, 28, axis=0), 28, axis=1)


def apply_age(img: np.ndarray, age: float) -> np.ndarray:
    ramp = 0.7 * min(age, 100.0) / 100.0 * (np.arange(SIZE) / (SIZE - 1))
    out = img.astype(np.float64)
    out += (255.0 - out) * ramp[:, None, None]
    return out


def draw_expression(img: np.ndarray, cls: int) -> None:
    white = (255, 255, 255)
    lo, hi, mid = 38, 74, 56
    if cls == 0:
        cv2.line(img, (lo, mid), (hi, mid), white, 4)
    elif cls == 1:
        cv2.line(img, (mid, lo), (mid, hi), white, 4)
    elif cls == 2:
        cv2.line(img, (lo, mid), (hi, mid), white, 4)
        cv2.line(img, (mid, lo), (mid, hi), white, 4)
    elif cls == 3:
        cv2.line(img, (lo, lo), (hi, hi), white, 4)
        cv2.line(img, (hi, lo), (lo, hi), white, 4)
    elif cls == 4:
        cv2.rectangle(img, (lo, lo), (hi, hi), white, 4)
    elif cls == 5:
        cv2.circle(img, (mid, mid), 14, white, -1)
    elif cls == 6:
        pts = np.array([[mid, lo], [lo, hi], [hi, hi]], np.int32)
        cv2.fillPoly(img, [pts], white)
    else:
        raise ValueError(f"expression class {cls} out of range")


def draw_attributes(img: np.ndarray, present) -> None:
    for j, on in enumerate(present):
        if not on:
            continue
        r, c = GLYPH_CELLS[j]
        y = 1 + 10 * r + 1
        for col in {c, 10 - c}:
            x = 1 + 10 * col + 1
            img[y:y + 7, x:x + 7] = 0


def render(texture_id: int, seed: int, rng: np.random.Generator, expression: Optional[int] = None,
           age: Optional[float] = None, attributes=None) -> np.ndarray:
    img = identity_texture(texture_id, seed).astype(np.float64)
    img += rng.normal(0.0, 6.0, img.shape) + rng.uniform(-8, 8)
    img = np.clip(img, 0, 255)
    if age is not None:
        img = apply_age(img, age)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    if expression is not None:
        draw_expression(img, expression)
    if attributes is not None:
        draw_attributes(img, attributes)
    return img


def generate_records(spec: SynthSpec):
    """Yield (record, image) pairs in manifest order."""
    rng = np.random.default_rng([spec.seed, 1])
    k = 0
    for ident in range(spec.identities):
        for j in range(spec.images_per_identity):
            img = render(ident, spec.seed, rng)
            yield ManifestRecord(f"images/identity/{k:05d}.png", "identity", identity=ident,
                                 landmarks=TEMPLATE.round(4).tolist()), img
            k += 1
    for i in range(spec.expression):
        cls = i % 7
        img = render(_DISTRACTOR_BASE + k, spec.seed, rng, expression=cls)
        yield ManifestRecord(f"images/expression/{k:05d}.png", "expression", expression=cls,
                             landmarks=TEMPLATE.round(4).tolist()), img
        k += 1
    for i in range(spec.age_gender):
        age = float(np.round(rng.uniform(1.0, 80.0), 1))
        sigma = float(np.round(rng.uniform(1.5, 5.0), 2)) if rng.random() < 0.5 else None
        gender = int(rng.random() < 0.5)
        attrs = [0] * NUM_ATTRIBUTES
        attrs[MALE] = gender
        img = render(_DISTRACTOR_BASE + k, spec.seed, rng, age=age, attributes=attrs)
        yield ManifestRecord(f"images/age_gender/{k:05d}.png", "age_gender", age=age, age_sigma=sigma,
                             gender=gender, landmarks=TEMPLATE.round(4).tolist()), img
        k += 1
    for i in range(spec.attribute):
        present = (rng.random(NUM_ATTRIBUTES) < 0.5).astype(int)
        known = rng.random(NUM_ATTRIBUTES) >= spec.unknown_rate
        labels = [int(p) if kn else None for p, kn in zip(present, known)]
        img = render(_DISTRACTOR_BASE + k, spec.seed, rng, attributes=present)
        yield ManifestRecord(f"images/attribute/{k:05d}.png", "attribute", attributes=labels), img
        k += 1


def generate_synthetic(spec: SynthSpec, out_dir) -> Path:
    """Write PNG images plus ``manifest.jsonl`` under ``out_dir``; returns the manifest path."""
    for name, n in (("identities", spec.identities), ("images_per_identity", spec.images_per_identity),
                    ("expression", spec.expression), ("age_gender", spec.age_gender),
                    ("attribute", spec.attribute)):
        if n < 1:
            raise ValueError(f"synthetic dataset field {name} must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records: List[ManifestRecord] = []
    for rec, img in generate_records(spec):
        path = out / rec.image_path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(path, format="PNG", compress_level=6)
        records.append(rec)
    (out / "synth_spec.json").write_text(_dump(asdict(spec)))
    return write_manifest(records, out / "manifest.jsonl")


def _dump(d: dict) -> str:
    import json
    return json.dumps(d, indent=2, sort_keys=True) + "\n"
