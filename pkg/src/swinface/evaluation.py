"""Verification, TAR@FAR, expression / age / attribute metrics, importance
tables and the latency measurement."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
import torch

from .backbone import normalize_images
from .data.manifest import Dataset
from .data.sampler import CompositeBatch, concat, gather
from .errors import ContractError, ProtocolError, ShapeError
from .heads import ATTRIBUTES, EXPRESSIONS, importance_report

REFERENCE_LATENCY = {"recognition_ms": 3.205, "all_outputs_ms": 4.357, "overhead": 0.36}


# --------------------------------------------------------------------------- verification

def pair_similarities(embeddings, pairs) -> np.ndarray:
    emb = np.asarray(embeddings, dtype=np.float64)
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    a = np.asarray([p[0] for p in pairs], dtype=np.int64)
    b = np.asarray([p[1] for p in pairs], dtype=np.int64)
    return np.einsum("ij,ij->i", emb[a], emb[b])


def _accuracy_at(scores: np.ndarray, same: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Accuracy of ``score >= t`` as a same-identity decision, for every t."""
    gen = np.sort(scores[same])
    imp = np.sort(scores[~same])
    gen_acc = gen.size - np.searchsorted(gen, thresholds, side="left")
    imp_rej = np.searchsorted(imp, thresholds, side="left")
    return (gen_acc + imp_rej) / scores.size


def best_threshold(scores: np.ndarray, same: np.ndarray):
    """Threshold with the best ``score >= t`` accuracy, and that accuracy.

    With u_0 < ... < u_{m-1} the distinct scores and u_m = +inf, every t in
    (u_{k-1}, u_k] makes the same decisions. The smallest best k wins and the
    returned threshold is the midpoint of its interval (u_0 when k = 0, +inf
    when rejecting everything is best), which keeps held-out scores that fall
    between the training extremes on the right side of the boundary.
    """
    u = np.unique(scores)
    cands = np.append(u, np.inf)
    acc = _accuracy_at(scores, same, cands)
    k = int(np.argmax(acc))
    if k == 0:
        thr = float(u[0])
    elif k == u.size:
        thr = math.inf
    else:
        thr = float(u[k - 1] + (u[k] - u[k - 1]) / 2)
    return thr, float(acc[k])


def verification_accuracy_from_scores(scores, same, folds: int = 10) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if scores.size < 2:
        raise ProtocolError("need at least two pairs")
    if same.all() or not same.any():
        raise ProtocolError("pairs must include both genuine and impostor pairs")
    if folds < 1 or folds > scores.size:
        raise ProtocolError(f"folds must lie in [1, {scores.size}]")
    if folds == 1:
        return best_threshold(scores, same)[1]
    accs = []
    for test in np.array_split(np.arange(scores.size), folds):
        train = np.setdiff1d(np.arange(scores.size), test)
        thr, _ = best_threshold(scores[train], same[train])
        accs.append(float(_accuracy_at(scores[test], same[test], np.array([thr]))[0]))
    return math.fsum(accs) / folds


def verification_accuracy(embeddings, pairs, folds: int = 10) -> float:
    """k-fold verification accuracy on cosine similarity of L2-normalised embeddings.

    ``pairs`` holds (index_a, index_b, same_identity) triples.
    """
    same = np.asarray([bool(p[2]) for p in pairs])
    return verification_accuracy_from_scores(pair_similarities(embeddings, pairs), same, folds)


def tar_at_far(genuine, impostor, far_targets) -> Dict[float, Optional[float]]:
    """TAR at the smallest impostor score whose acceptance rate is within each
    target; ``None`` where the target is below 1/len(impostor)."""
    gen = np.sort(np.asarray(genuine, dtype=np.float64))
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    if gen.size == 0 or imp.size == 0:
        raise ProtocolError("both genuine and impostor scores are required")
    cands = np.unique(imp)
    far = (imp.size - np.searchsorted(imp, cands, side="left")) / imp.size
    out = {}
    for target in far_targets:
        if not 0 < target <= 1:
            raise ProtocolError(f"FAR target must lie in (0, 1], got {target}")
        ok = np.flatnonzero(far <= target)
        if target < 1.0 / imp.size or ok.size == 0:
            out[target] = None
            continue
        thr = cands[ok[0]]
        out[target] = float((gen.size - np.searchsorted(gen, thr, side="left")) / gen.size)
    return out


def all_pairs(identities: Sequence[int]):
    ids = list(identities)
    return [(i, j, ids[i] == ids[j]) for i in range(len(ids)) for j in range(i + 1, len(ids))]


# --------------------------------------------------------------------------- age / classification

def age_metrics(pred, target, sigma):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), pred.shape)
    if pred.size == 0:
        raise ContractError("no age records")
    if (sigma <= 0).any():
        raise ContractError("sigma must be positive")
    d = pred - target
    eps = 1.0 - np.exp(-(d**2) / (2 * sigma**2))
    return float(np.mean(np.abs(d))), float(np.mean(eps))


def _binary_probs(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim < 1 or logits.shape[-1] != 2:
        raise ShapeError(f"binary outputs must end in width 2, got {logits.shape}")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e[..., 1] / e.sum(axis=-1)


def classification_report(outputs, labels, task_kind: str) -> dict:
    """``multiclass``: argmax accuracy plus per-class accuracy.
    ``binary``: positive-class probability >= 0.5.
    ``attributes``: ``outputs`` maps attribute name -> (N, 2) logits (or is an
    (N, 40, 2) array); ``labels`` is (N, 40) with -1 for unknown."""
    if task_kind == "multiclass":
        out = np.asarray(outputs)
        lab = np.asarray(labels, dtype=np.int64)
        if out.ndim != 2 or out.shape[0] != lab.shape[0]:
            raise ShapeError("multiclass outputs must be (N, classes) matching labels")
        hit = out.argmax(axis=1) == lab
        per = {}
        for c in range(out.shape[1]):
            m = lab == c
            if m.any():
                name = EXPRESSIONS[c] if out.shape[1] == len(EXPRESSIONS) else str(c)
                per[name] = float(hit[m].mean())
        return {"accuracy": float(hit.mean()), "per_class": per, "count": int(lab.size)}
    if task_kind == "binary":
        p = _binary_probs(outputs)
        lab = np.asarray(labels, dtype=np.int64)
        if p.shape != lab.shape:
            raise ShapeError("binary outputs and labels disagree in length")
        return {"accuracy": float(((p >= 0.5) == (lab == 1)).mean()), "count": int(lab.size)}
    if task_kind == "attributes":
        lab = np.asarray(labels, dtype=np.int64)
        if isinstance(outputs, Mapping):
            arr = np.stack([np.asarray(outputs[a]) for a in ATTRIBUTES], axis=1)
        else:
            arr = np.asarray(outputs)
        if arr.ndim != 3 or arr.shape[1:] != (len(ATTRIBUTES), 2) or lab.shape != arr.shape[:2]:
            raise ShapeError(f"attribute outputs must be (N, 40, 2) with (N, 40) labels, got {arr.shape}")
        p = _binary_probs(arr)
        per = {}
        for j, name in enumerate(ATTRIBUTES):
            m = lab[:, j] >= 0
            if m.any():
                per[name] = float(((p[m, j] >= 0.5) == (lab[m, j] == 1)).mean())
        mean = math.fsum(per.values()) / len(per) if per else float("nan")
        return {"per_attribute": per, "mean_accuracy": mean}
    raise ValueError(f"unknown task kind {task_kind!r}")


# --------------------------------------------------------------------------- model-level helpers

@dataclass
class Predictions:
    batch: CompositeBatch
    embeddings: np.ndarray
    outputs: Dict[str, np.ndarray]
    activations: Dict[str, np.ndarray]


def dataset_batch(dataset: Dataset, default_sigma: float = 3.0) -> CompositeBatch:
    rng = np.random.default_rng(0)
    return gather(dataset, range(len(dataset)), None, "none", rng, default_sigma)


def images_to_tensor(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    return normalize_images(torch.from_numpy(np.ascontiguousarray(images)).to(dtype))


@torch.no_grad()
def predict_images(model, images: np.ndarray, batch_size: int = 64, subnets=None):
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    embs, outs, acts = [], {}, {}
    try:
        for s in range(0, len(images), batch_size):
            res = model(images_to_tensor(images[s:s + batch_size], dtype), subnets=subnets)
            embs.append(res.embedding.cpu().numpy())
            for k, v in res.outputs.items():
                outs.setdefault(k, []).append(v.cpu().numpy())
            for k, v in res.activations.items():
                acts.setdefault(k, []).append(v.cpu().numpy())
    finally:
        model.train(was_training)
    cat = lambda d: {k: np.concatenate(v) for k, v in d.items()}  # noqa: E731
    return np.concatenate(embs) if embs else np.zeros((0, 0)), cat(outs), cat(acts)


def predict(model, dataset: Dataset, batch_size: int = 64, default_sigma: float = 3.0) -> Predictions:
    batch = dataset_batch(dataset, default_sigma)
    emb, outs, acts = predict_images(model, batch.images, batch_size)
    return Predictions(batch, emb, outs, acts)


def task_metrics(pred: Predictions, folds: int = 10, far_targets=(1e-3, 1e-2, 1e-1)) -> dict:
    b = pred.batch
    rows = b.task_rows()
    report: dict = {}
    ids = rows["identity"]
    if ids.size >= 2:
        pairs = all_pairs(b.identity[ids].tolist())
        same = np.array([p[2] for p in pairs])
        if same.any() and not same.all():
            scores = pair_similarities(pred.embeddings[ids], pairs)
            report["recognition"] = {
                "pairs": len(pairs),
                "verification_accuracy": verification_accuracy_from_scores(scores, same, min(folds, len(pairs))),
                "tar_at_far": {str(k): v for k, v in tar_at_far(scores[same], scores[~same], far_targets).items()},
            }
    if "Expression" in pred.outputs and rows["expression"].size:
        r = rows["expression"]
        report["expression"] = classification_report(pred.outputs["Expression"][r], b.expression[r], "multiclass")
    if "Age" in pred.outputs and rows["age"].size:
        r = rows["age"]
        mae, eps = age_metrics(pred.outputs["Age"][r, 0], b.age[r], b.age_sigma[r])
        report["age"] = {"mae": mae, "epsilon_error": eps, "count": int(r.size)}
    if all(a in pred.outputs for a in ATTRIBUTES) and (b.attributes >= 0).any():
        report["attributes"] = classification_report(
            {a: pred.outputs[a] for a in ATTRIBUTES}, b.attributes, "attributes")
    return report


def importance_table(model, pred: Predictions) -> dict:
    """Per-subnet mean activation per pyramid level over the analysis rows."""
    rows = np.flatnonzero(pred.batch.category != 0)
    if rows.size == 0:
        rows = np.arange(len(pred.batch))
    table = {}
    for name, acts in pred.activations.items():
        alloc = model.subnets[name].allocation
        scores = importance_report(acts[rows], alloc)
        table[name] = {f"FM{lvl + 1}": s for lvl, s in zip(alloc.levels, scores)}
    return table


@torch.no_grad()
def latency_report(model, batch_size: int = 32, trials: int = 20, warmup: int = 3) -> dict:
    """Mean wall time of (a) backbone + recognition subnet and (b) every output."""
    dtype = next(model.parameters()).dtype
    size = model.config.backbone.image_size
    x = torch.zeros(batch_size, size, size, 3, dtype=dtype)
    was_training = model.training
    model.eval()

    def rec():
        model(x, subnets=[], recognition=True)

    def full():
        model(x)

    try:
        for _ in range(warmup):
            rec()
            full()
        t_rec, t_full = [], []
        for _ in range(max(1, trials)):
            t0 = time.perf_counter()
            rec()
            t1 = time.perf_counter()
            full()
            t2 = time.perf_counter()
            t_rec.append(t1 - t0)
            t_full.append(t2 - t1)
    finally:
        model.train(was_training)
    r_ms = 1000 * float(np.mean(t_rec))
    f_ms = 1000 * float(np.mean(t_full))
    return {
        "batch_size": batch_size,
        "trials": max(1, trials),
        "recognition_ms": r_ms,
        "all_outputs_ms": f_ms,
        "overhead": f_ms / r_ms - 1.0,
        "reference": dict(REFERENCE_LATENCY),
    }


__all__ = [
    "verification_accuracy", "verification_accuracy_from_scores", "tar_at_far", "age_metrics",
    "classification_report", "latency_report", "predict", "task_metrics", "importance_table",
    "best_threshold", "pair_similarities", "all_pairs", "Predictions", "concat",
]
