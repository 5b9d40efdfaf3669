import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinface.errors import ContractError, ProtocolError, ShapeError
from swinface.evaluation import (age_metrics, all_pairs, classification_report, latency_report,
                                 pair_similarities, tar_at_far, verification_accuracy,
                                 verification_accuracy_from_scores)
from swinface.heads import ATTRIBUTES


# --------------------------------------------------------------------------- brute-force oracles

def oracle_best(scores, same):
    """Every decision interval tried in a plain loop; ties go to the lowest
    interval, whose midpoint is the threshold."""
    u = sorted(set(scores.tolist()))
    best_k, best_acc = None, -1.0
    for k, t in enumerate(u + [math.inf]):
        acc = sum((s >= t) == g for s, g in zip(scores, same)) / len(scores)
        if acc > best_acc:
            best_k, best_acc = k, acc
    if best_k == 0:
        return u[0], best_acc
    if best_k == len(u):
        return math.inf, best_acc
    return u[best_k - 1] + (u[best_k] - u[best_k - 1]) / 2, best_acc


def oracle_verification(scores, same, folds):
    if folds == 1:
        return oracle_best(scores, same)[1]
    idx = np.array_split(np.arange(len(scores)), folds)
    accs = []
    for test in idx:
        train = np.setdiff1d(np.arange(len(scores)), test)
        t, _ = oracle_best(scores[train], same[train])
        accs.append(sum((scores[i] >= t) == same[i] for i in test) / len(test))
    return math.fsum(accs) / folds


def oracle_tar(gen, imp, target):
    if target < 1 / len(imp):
        return None
    for t in sorted(set(imp)):
        if sum(s >= t for s in imp) / len(imp) <= target:
            return sum(s >= t for s in gen) / len(gen)
    return None


# --------------------------------------------------------------------------- verification

def test_hand_built_pairs():
    scores = np.array([0.9, 0.8, 0.3, 0.4])
    same = np.array([True, True, False, False])
    assert verification_accuracy_from_scores(scores, same, folds=1) == 1.0
    for t in (0.41, 0.6, 0.79):
        assert ((scores >= t) == same).all()


def test_perfect_separation_and_ties():
    rng = np.random.default_rng(0)
    scores = np.concatenate([rng.uniform(0.7, 1, 50), rng.uniform(-1, 0.3, 50)])
    same = np.arange(100) < 50
    assert verification_accuracy_from_scores(scores, same, 10) == 1.0
    flat = np.full(20, 0.3)
    assert verification_accuracy_from_scores(flat, np.arange(20) % 2 == 0, 1) == 0.5


def test_protocol_errors():
    with pytest.raises(ProtocolError):
        verification_accuracy_from_scores([0.1, 0.2], [True, True], 1)
    with pytest.raises(ProtocolError):
        verification_accuracy_from_scores([0.1], [True], 1)
    with pytest.raises(ProtocolError):
        verification_accuracy_from_scores([0.1, 0.2], [True, False], 3)


def test_verification_oracle_200_pairs_100_seeds():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        same = rng.random(200) < 0.5
        # coarse rounding forces plenty of tied scores
        scores = np.round(np.where(same, rng.normal(0.5, 0.25, 200), rng.normal(0.1, 0.25, 200)), 2)
        for folds in (1, 10):
            assert verification_accuracy_from_scores(scores, same, folds) == oracle_verification(scores, same, folds)


def test_tar_oracle_200_pairs_100_seeds():
    targets = (1e-3, 1e-2, 0.05, 0.1, 0.5, 1.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        n_gen = int(rng.integers(20, 180))
        gen = np.round(rng.normal(0.5, 0.2, n_gen), 2)
        imp = np.round(rng.normal(0.1, 0.2, 200 - n_gen), 2)
        got = tar_at_far(gen, imp, targets)
        for t in targets:
            assert got[t] == oracle_tar(gen.tolist(), imp.tolist(), t)


def test_tar_examples():
    res = tar_at_far([0.9, 0.8, 0.2], [0.7, 0.1], (0.5, 1.0, 0.4))
    assert res[0.5] == 2 / 3 and res[1.0] == 1.0
    assert res[0.4] is None  # 0.4 < 1/2
    assert tar_at_far([0.9, 0.8], [0.1, 0.2, 0.3], (1 / 3, 1.0)) == {1 / 3: 1.0, 1.0: 1.0}
    with pytest.raises(ProtocolError):
        tar_at_far([], [0.1], (0.1,))
    with pytest.raises(ProtocolError):
        tar_at_far([0.2], [0.1], (0.0,))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(12, 8))
    ids = rng.integers(0, 4, 12)
    pairs = all_pairs(ids.tolist())
    if len({p[2] for p in pairs}) < 2:
        return
    assert verification_accuracy(emb, pairs, 5) == verification_accuracy(emb * c, pairs, 5)
    assert np.allclose(pair_similarities(emb, pairs), pair_similarities(emb * c, pairs), atol=1e-12)


# --------------------------------------------------------------------------- age / classification

def test_age_spot_values():
    assert age_metrics([10, 20], [10, 20], [3, 3]) == (0.0, 0.0)
    mae, eps = age_metrics([13.0], [10.0], [3.0])
    assert mae == 3.0 and abs(eps - (1 - math.exp(-0.5))) <= 1e-10
    assert abs(eps - 0.39347) < 1e-5
    with pytest.raises(ContractError):
        age_metrics([1.0], [2.0], [0.0])
    with pytest.raises(ContractError):
        age_metrics([], [], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 90),
                          st.one_of(st.just(0.0), st.floats(1e-6, 8), st.floats(-8, -1e-6)),
                          st.floats(0.5, 8)), min_size=1, max_size=20))
def test_age_bounds(rows):
    # errors stay within 8 sigma (beyond, 1 - exp(-x) rounds to 1.0) and are either zero or large
    # enough that their square does not underflow
    t, ratio, s = map(np.array, zip(*rows))
    p = t + ratio * s
    mae, eps = age_metrics(p, t, s)
    assert mae >= 0 and 0 <= eps < 1
    assert (eps == 0) == bool(np.all(p == t))


def test_classification_examples():
    out = np.eye(7)[[0, 3, 5]]
    assert classification_report(out, [0, 3, 5], "multiclass")["accuracy"] == 1.0
    assert classification_report(out, [0, 3, 4], "multiclass")["accuracy"] == 2 / 3
    logits = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 0.0]])
    assert classification_report(logits, [1, 0, 1], "binary")["accuracy"] == 1.0
    with pytest.raises(ShapeError):
        classification_report(np.zeros((3, 3)), [1, 0, 1], "binary")
    with pytest.raises(ShapeError):
        classification_report(np.zeros((3, 7)), [1, 0], "multiclass")


def test_attribute_mean_is_unweighted_mean():
    rng = np.random.default_rng(0)
    out = rng.normal(size=(30, 40, 2))
    lab = rng.integers(0, 2, (30, 40))
    rep = classification_report(out, lab, "attributes")
    assert list(rep["per_attribute"]) == list(ATTRIBUTES)
    assert abs(rep["mean_accuracy"] - np.mean(list(rep["per_attribute"].values()))) <= 1e-12
    named = classification_report({a: out[:, j] for j, a in enumerate(ATTRIBUTES)}, lab, "attributes")
    assert named == rep


# --------------------------------------------------------------------------- latency

def test_latency_schema(tiny_model64):
    a = latency_report(tiny_model64, batch_size=2, trials=1, warmup=1)
    b = latency_report(tiny_model64, batch_size=2, trials=3, warmup=1)
    assert set(a) == set(b)
    assert a["overhead"] > 0 and b["overhead"] > 0
    assert a["reference"]["overhead"] == 0.36
