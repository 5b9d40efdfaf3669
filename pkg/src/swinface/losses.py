"""Margin-softmax recognition loss with partial class sampling, expression,
age and attribute losses, the age-loss mixing ramp and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, SamplingError, ShapeError

PROB_EPS = 1e-7


def pfc_sample(n: int, positives, r: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted class subset of size ceil(r*n) holding every positive class."""
    if not 0 < r <= 1:
        raise SamplingError(f"sampling ratio must lie in (0, 1], got {r}")
    pos = np.unique(np.asarray(list(positives), dtype=np.int64))
    if pos.size and (pos.min() < 0 or pos.max() >= n):
        raise SamplingError(f"positive classes must lie in [0, {n})")
    size = min(n, math.ceil(r * n - 1e-9))
    if pos.size > size:
        raise SamplingError(
            f"batch holds {pos.size} distinct identities but only {size} class centers are sampled")
    if size == n:
        return np.arange(n, dtype=np.int64)
    negatives = np.setdiff1d(np.arange(n, dtype=np.int64), pos, assume_unique=True)
    extra = rng.choice(negatives, size=size - pos.size, replace=False)
    return np.sort(np.concatenate([pos, extra]))


def margin_logits(embeddings: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                  scale: float = 64.0, margin: float = 0.4, margin_type: str = "cosface") -> torch.Tensor:
    """Scaled cosine logits with the margin applied to each sample's target column.

    ``labels`` index rows of ``centers``.
    """
    cos = F.normalize(embeddings, dim=1) @ F.normalize(centers, dim=1).t()
    onehot = F.one_hot(labels, cos.shape[1]).to(torch.bool)
    if margin_type == "cosface":
        target = cos - margin
    elif margin_type == "arcface":
        target = torch.cos(torch.acos(cos.clamp(-1 + 1e-7, 1 - 1e-7)) + margin)
    else:
        raise ValueError(f"unknown margin type {margin_type!r}")
    return scale * torch.where(onehot, target, cos)


def cosface_loss(embeddings: torch.Tensor, labels: torch.Tensor, centers: torch.Tensor,
                 scale: float = 64.0, margin: float = 0.4, sampled=None,
                 margin_type: str = "cosface") -> torch.Tensor:
    """Mean margin-softmax loss; the denominator only runs over ``sampled`` classes.

    Evaluated as log(1 + exp(logsumexp_{j != y} l_j - l_y)) through
    ``logaddexp``, which stays exact for tiny losses and stable for large logits.
    """
    if not torch.isfinite(embeddings).all():
        raise ContractError("embeddings contain non-finite values")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if sampled is not None:
        sampled_t = torch.as_tensor(np.asarray(sampled), dtype=torch.long)
        lookup = torch.full((centers.shape[0],), -1, dtype=torch.long)
        lookup[sampled_t] = torch.arange(sampled_t.numel())
        local = lookup[labels]
        if (local < 0).any():
            raise ContractError("every label must be inside the sampled class set")
        centers = centers.index_select(0, sampled_t)
        labels = local
    n = centers.shape[0]
    if n == 1:
        return embeddings.sum() * 0.0
    logits = margin_logits(embeddings, labels, centers, scale, margin, margin_type)
    target = logits.gather(1, labels[:, None]).squeeze(1)
    others = logits.masked_fill(F.one_hot(labels, n).to(torch.bool), float("-inf"))
    z = torch.logsumexp(others, dim=1) - target
    return torch.logaddexp(torch.zeros_like(z), z).mean()


def expression_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim != 2:
        raise ShapeError("expression logits must be (N, classes)")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"expression labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def age_loss(pred: torch.Tensor, target: torch.Tensor, sigma, lam: float) -> torch.Tensor:
    """(1-lam) * squared-error/2 + lam * (1 - exp(-d^2 / (2 sigma^2))), averaged."""
    sigma = torch.as_tensor(sigma, dtype=pred.dtype)
    if (sigma <= 0).any():
        raise ContractError("age sigma must be positive")
    if not 0 <= lam <= 1:
        raise ContractError("lambda must lie in [0, 1]")
    d2 = (pred - target) ** 2
    gauss = 1 - torch.exp(-d2 / (2 * sigma**2))
    return ((1 - lam) * 0.5 * d2 + lam * gauss).mean()


def attribute_loss(p: torch.Tensor, q: torch.Tensor, eps: float = PROB_EPS) -> torch.Tensor:
    """Binary cross-entropy on positive-class probabilities clamped to [eps, 1-eps]."""
    p = p.clamp(eps, 1 - eps)
    q = q.to(p.dtype)
    return (-(1 - q) * torch.log(1 - p) - q * torch.log(p)).mean()


def binary_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)[..., 1]


def lambda_schedule(step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return 1.0
    return min(max(step / total_steps, 0.0), 1.0)


@dataclass
class LossBundle:
    losses: Dict[str, torch.Tensor] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)
    total: Optional[torch.Tensor] = None

    def values(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.losses.items()}


def total_loss(losses: Dict[str, torch.Tensor], counts: Dict[str, int],
               weights: Optional[Dict[str, float]] = None) -> LossBundle:
    """Weighted sum over tasks that have samples; weights default to 1.0."""
    weights = weights or {}
    present = {t: v for t, v in losses.items() if counts.get(t, 0) > 0}
    if not present:
        raise ContractError("no task has samples in this batch")
    used = {t: float(weights.get(t, 1.0)) for t in present}
    total = sum(used[t] * v for t, v in present.items())
    if not torch.is_tensor(total):
        total = torch.as_tensor(total, dtype=torch.float64)
    return LossBundle(present, {t: counts[t] for t in present}, used, total)
