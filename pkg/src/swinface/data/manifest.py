"""Line-delimited JSON manifests and the in-memory dataset handle."""
from __future__ import annotations

import dataclasses
import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional

import cv2
import numpy as np
from PIL import Image

from ..errors import ManifestError
from .align import align_face

CATEGORIES = ("identity", "expression", "age_gender", "attribute")
NUM_ATTRIBUTES = 40
_REQUIRED = {
    "identity": ("identity",),
    "expression": ("expression",),
    "age_gender": ("age", "gender"),
    "attribute": ("attributes",),
}


@dataclass
class ManifestRecord:
    image_path: str
    label_category: str
    identity: Optional[int] = None
    expression: Optional[int] = None
    age: Optional[float] = None
    age_sigma: Optional[float] = None
    gender: Optional[int] = None
    attributes: Optional[list] = None
    landmarks: Optional[list] = None

    def validate(self) -> "ManifestRecord":
        if self.label_category not in CATEGORIES:
            raise ManifestError(f"unknown label_category {self.label_category!r}")
        missing = [f for f in _REQUIRED[self.label_category] if getattr(self, f) is None]
        if missing:
            raise ManifestError(
                f"label_category {self.label_category!r} requires field(s) {', '.join(missing)}")
        if self.age is not None and self.age < 0:
            raise ManifestError(f"age must be >= 0, got {self.age}")
        if self.age_sigma is not None and self.age_sigma <= 0:
            raise ManifestError(f"age_sigma must be > 0, got {self.age_sigma}")
        if self.expression is not None and not 0 <= self.expression < 7:
            raise ManifestError(f"expression must be in [0, 7), got {self.expression}")
        if self.gender is not None and self.gender not in (0, 1):
            raise ManifestError(f"gender must be 0 or 1, got {self.gender}")
        if self.attributes is not None:
            if len(self.attributes) != NUM_ATTRIBUTES:
                raise ManifestError(f"attributes must have {NUM_ATTRIBUTES} slots, got {len(self.attributes)}")
            if any(a not in (0, 1, None) for a in self.attributes):
                raise ManifestError("attribute slots must be 0, 1 or null")
        if self.landmarks is not None and np.asarray(self.landmarks).shape != (5, 2):
            raise ManifestError("landmarks must be five (x, y) points")
        return self

    def to_json(self) -> str:
        data = {k: v for k, v in dataclasses.asdict(self).items() if v is not None}
        return json.dumps(data, sort_keys=True)


def parse_record(line: str, lineno: int) -> ManifestRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed record: {exc.msg}", line=lineno) from None
    if not isinstance(data, dict):
        raise ManifestError("record must be a JSON object", line=lineno)
    names = {f.name for f in dataclasses.fields(ManifestRecord)}
    unknown = set(data) - names
    if unknown:
        raise ManifestError(f"unknown field(s): {', '.join(sorted(unknown))}", line=lineno)
    try:
        return ManifestRecord(**data).validate()
    except ManifestError as exc:
        raise ManifestError(str(exc), line=lineno) from None
    except TypeError as exc:
        raise ManifestError(str(exc), line=lineno) from None


def write_manifest(records: Iterable[ManifestRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")
    tmp.replace(path)
    return path


class Dataset:
    """Validated records plus a lazily filled, shared image cache.

    ``image_size`` is the side images are resized to after optional alignment.
    """

    def __init__(self, records: List[ManifestRecord], root: Path, image_size: int = 112,
                 align: bool = False, _cache: Optional[dict] = None, _index: Optional[list] = None):
        self.records = records
        self.root = Path(root)
        self.image_size = image_size
        self.align = align
        self._cache = {} if _cache is None else _cache
        self._index = list(range(len(records))) if _index is None else _index

    def __len__(self):
        return len(self._index)

    def record(self, i: int) -> ManifestRecord:
        return self.records[self._index[i]]

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    def counts(self) -> dict:
        c = Counter(self.record(i).label_category for i in range(len(self)))
        return {cat: c.get(cat, 0) for cat in CATEGORIES}

    def filter(self, category: str) -> "Dataset":
        idx = [j for j in self._index if self.records[j].label_category == category]
        return Dataset(self.records, self.root, self.image_size, self.align, self._cache, idx)

    def with_image_size(self, size: int) -> "Dataset":
        return Dataset(self.records, self.root, size, self.align, None, self._index)

    def image(self, i: int) -> np.ndarray:
        j = self._index[i]
        if j not in self._cache:
            self._cache[j] = self._load(self.records[j])
        return self._cache[j]

    def _load(self, rec: ManifestRecord) -> np.ndarray:
        path = Path(rec.image_path)
        if not path.is_absolute():
            path = self.root / path
        img = read_image(path)
        if self.align:
            mode = "extended" if rec.label_category == "attribute" else "recognition"
            if rec.landmarks is not None or mode == "extended":
                img = align_face(img, rec.landmarks, mode)
        return resize(img, self.image_size)


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def resize(img: np.ndarray, size: int) -> np.ndarray:
    if img.shape[0] == size and img.shape[1] == size:
        return img
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_AREA)


def load_manifest(path, image_size: int = 112, align: bool = False) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                records.append(parse_record(line, lineno))
    return Dataset(records, path.parent, image_size, align)


def load_manifests(paths, image_size: int = 112, align: bool = False) -> Dataset:
    """Concatenate several manifests; image paths are made absolute."""
    records = []
    for p in paths:
        ds = load_manifest(p, image_size, align)
        for r in ds.records:
            ip = Path(r.image_path)
            records.append(dataclasses.replace(r, image_path=str(ip if ip.is_absolute() else ds.root / ip)))
    return Dataset(records, Path("."), image_size, align)
