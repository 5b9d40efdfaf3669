"""Per-sample augmentation: horizontal flip, RandAugment, random erasing."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from torchvision import transforms as T

RANDAUGMENT = T.RandAugment(num_ops=2, magnitude=9)
ERASING = T.RandomErasing(p=0.25, scale=(0.02, 0.2), value=0)


def hflip(image: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(image[:, ::-1])


def augment(image: np.ndarray, policy: str, rng: np.random.Generator,
            force_flip: Optional[bool] = None) -> np.ndarray:
    """``flip_only``: flip with p=0.5. ``full``: flip, RandAugment, random erasing.
    ``none``: unchanged. Output depends only on the image and ``rng``."""
    if policy == "none":
        return image
    flip = rng.random() < 0.5 if force_flip is None else force_flip
    out = hflip(image) if flip else image
    if policy == "flip_only":
        return out
    if policy != "full":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    seed = int(rng.integers(0, 2**63 - 1))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        t = torch.from_numpy(np.ascontiguousarray(out)).permute(2, 0, 1)
        t = ERASING(RANDAUGMENT(t))
    return t.permute(1, 2, 0).contiguous().numpy()
