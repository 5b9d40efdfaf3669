"""Composite batches: fixed-size draws from each label-category source."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Mapping, Sequence

import numpy as np

from ..errors import CompositionError
from .augment import augment
from .manifest import CATEGORIES, NUM_ATTRIBUTES, Dataset

MALE = 20  # index of "Male" in the attribute listing
CATEGORY_ID = {c: i for i, c in enumerate(CATEGORIES)}


@dataclass
class CompositeBatch:
    images: np.ndarray       # (B, H, W, 3) uint8
    category: np.ndarray     # (B,) index into CATEGORIES
    identity: np.ndarray     # (B,) int64, -1 when absent
    expression: np.ndarray   # (B,) int64, -1 when absent
    age: np.ndarray          # (B,) float64, nan when absent
    age_sigma: np.ndarray    # (B,) float64, nan when absent
    attributes: np.ndarray   # (B, 40) int8, -1 when unknown
    source_index: np.ndarray  # (B,) position inside the category source

    def __len__(self):
        return len(self.category)

    def rows(self, category: str) -> np.ndarray:
        return np.flatnonzero(self.category == CATEGORY_ID[category])

    def task_rows(self) -> Dict[str, np.ndarray]:
        """Rows each loss family may consume, by label category and label presence."""
        return {
            "identity": np.flatnonzero((self.category == CATEGORY_ID["identity"]) & (self.identity >= 0)),
            "expression": np.flatnonzero((self.category == CATEGORY_ID["expression"]) & (self.expression >= 0)),
            "age": np.flatnonzero((self.category == CATEGORY_ID["age_gender"]) & ~np.isnan(self.age)),
        }

    def counts(self) -> Dict[str, int]:
        return {c: int((self.category == CATEGORY_ID[c]).sum()) for c in CATEGORIES}


@lru_cache(maxsize=4096)
def _permutation(n: int, seed: int, source: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, source, epoch]).permutation(n)


def stream_indices(n: int, seed: int, source: int, start: int, count: int) -> np.ndarray:
    """Positions ``start .. start+count`` of an endless stream of reshuffled epochs."""
    pos = np.arange(start, start + count)
    out = np.empty(count, dtype=np.int64)
    for k, p in enumerate(pos):
        out[k] = _permutation(n, seed, source, int(p // n))[p % n]
    return out


def policy_for(category: str, augment_mode: str) -> str:
    if augment_mode == "per_category":
        return "flip_only" if category == "identity" else "full"
    return augment_mode


def gather(dataset: Dataset, indices: Sequence[int], category: str, policy: str,
           rng: np.random.Generator, default_sigma: float = 3.0) -> CompositeBatch:
    n = len(indices)
    images = []
    identity = np.full(n, -1, np.int64)
    expression = np.full(n, -1, np.int64)
    age = np.full(n, np.nan)
    sigma = np.full(n, np.nan)
    attrs = np.full((n, NUM_ATTRIBUTES), -1, np.int8)
    cats = np.empty(n, np.int64)
    for k, i in enumerate(indices):
        rec = dataset.record(int(i))
        cat = rec.label_category if category is None else category
        cats[k] = CATEGORY_ID[cat]
        images.append(augment(dataset.image(int(i)), policy_for(cat, policy), rng))
        if rec.identity is not None and cat == "identity":
            identity[k] = rec.identity
        if rec.expression is not None and cat == "expression":
            expression[k] = rec.expression
        if rec.age is not None and cat == "age_gender":
            age[k] = rec.age
            sigma[k] = rec.age_sigma if rec.age_sigma is not None else default_sigma
        if rec.attributes is not None:
            attrs[k] = [-1 if a is None else a for a in rec.attributes]
        if rec.gender is not None:
            attrs[k, MALE] = rec.gender
    return CompositeBatch(np.stack(images) if images else np.zeros((0, dataset.image_size, dataset.image_size, 3), np.uint8),
                          cats, identity, expression, age, sigma, attrs, np.asarray(indices, np.int64))


def concat(parts: Sequence[CompositeBatch]) -> CompositeBatch:
    return CompositeBatch(*[np.concatenate([getattr(p, f) for p in parts])
                            for f in CompositeBatch.__dataclass_fields__])


def compose_batch(sources: Mapping[str, Dataset], per_category: int, seed: int, step: int,
                  augment_mode: str = "per_category", default_sigma: float = 3.0) -> CompositeBatch:
    """Batch for training step ``step`` (0-based): ``per_category`` samples from
    each source, in CATEGORIES order. A pure function of its arguments, so a
    resumed run sees exactly the batches an uninterrupted one would."""
    parts = []
    for cat in CATEGORIES:
        if cat not in sources:
            continue
        src = sources[cat]
        if len(src) == 0:
            raise CompositionError(f"source {cat!r} is empty")
        idx = stream_indices(len(src), seed, CATEGORY_ID[cat], step * per_category, per_category)
        rng = np.random.default_rng([seed, CATEGORY_ID[cat], step, 1])
        parts.append(gather(src, idx, cat, augment_mode, rng, default_sigma))
    if not parts:
        raise CompositionError("no sources given")
    return concat(parts)


def split_sources(dataset: Dataset, categories: Sequence[str] = CATEGORIES) -> Dict[str, Dataset]:
    return {c: dataset.filter(c) for c in categories if len(dataset.filter(c))}
