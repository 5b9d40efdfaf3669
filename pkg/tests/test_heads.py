import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from swinface.config import canonical_config
from swinface.errors import RegistryError, ShapeError
from swinface.heads import (ATTRIBUTES, EXPRESSIONS, AnalysisSubnet, RecognitionHead, default_registry,
                            importance_report, subnet_forward)
from swinface.mlca import ChannelAllocation
from swinface.model import build_model, parameter_budget

CANON = (192, 384, 768, 768)
SCALES = (4, 2, 1, 1)


def test_registry_shape():
    reg = default_registry()
    assert len(reg.subnets) == 11
    assert [len(v) for v in reg.subnets.values()] == [2, 2, 1, 6, 10, 5, 2, 4, 6, 2, 2]
    assert len(reg.tasks) == 42
    kinds = [t.kind for t in reg.tasks.values()]
    assert kinds.count("multiclass") == 1 and kinds.count("regression") == 1 and kinds.count("binary") == 40
    assert reg.tasks["Expression"].width == 7 and reg.tasks["Age"].width == 1 and reg.tasks["Male"].width == 2


def test_registry_rows():
    reg = default_registry()
    assert len(reg.subnets["Hair"]) == 10
    assert {"Bald", "Wearing Hat"} <= set(reg.subnets["Hair"])
    assert tuple(reg.subnets["Gender"]) == ("Male",)
    assert set(reg.subnets["Expression"]) == {"Expression", "Smiling"}
    assert set(reg.subnets["Age"]) == {"Age", "Young"}


def test_every_attribute_has_exactly_one_subnet():
    reg = default_registry()
    binary = sorted(t.name for t in reg.tasks.values() if t.kind == "binary")
    assert binary == sorted(ATTRIBUTES)
    assert len(ATTRIBUTES) == 40 and len(EXPRESSIONS) == 7
    assert ATTRIBUTES.index("Male") == 20


def test_unknown_subnet():
    with pytest.raises(RegistryError):
        default_registry().subnet_tasks("Tail")
    with pytest.raises(RegistryError):
        default_registry().select(["Age", "Tail"])


def test_recognition_head():
    head = RecognitionHead(768, 512).eval()
    out = head(torch.randn(4, 7, 7, 768))
    assert out.shape == (4, 512) and torch.isfinite(out).all()
    n = sum(p.numel() for p in head.parameters())
    assert 0.5e6 <= n <= 1.5e6
    with pytest.raises(ShapeError):
        head(torch.randn(4, 7, 7, 512))


def test_recognition_head_without_bn_returns_pooled():
    head = RecognitionHead(768, 512, use_bn=False)
    x = torch.randn(2, 7, 7, 768)
    assert torch.equal(head(x), x.mean(dim=(1, 2)))
    assert sum(p.numel() for p in head.parameters()) == 0


def _canonical_pyramid(batch=2):
    return [torch.randn(batch, 7 * s, 7 * s, c) for c, s in zip(CANON, SCALES)]


@pytest.mark.parametrize("name, expected", [
    ("Expression", {"Expression": 7, "Smiling": 2}),
    ("Age", {"Age": 1, "Young": 2}),
])
def test_subnet_outputs(name, expected):
    reg = default_registry()
    sub = AnalysisSubnet(name, reg.subnet_tasks(name), CANON, SCALES)
    res = sub(_canonical_pyramid())
    assert {k: v.shape for k, v in res.outputs.items()} == {k: (2, w) for k, w in expected.items()}
    assert res.activation.shape == (2, 512) and (res.activation >= 0).all()


def test_subnet_forward_unknown_name():
    with pytest.raises(RegistryError):
        subnet_forward(_canonical_pyramid(), torch.nn.ModuleDict(), "Age")


def test_canonical_parameter_budgets():
    model = build_model(canonical_config(), num_classes=10)
    budget = parameter_budget(model)
    assert abs(budget["backbone"] - 28.5e6) / 28.5e6 <= 0.03
    assert 0.5e6 <= budget["recognition"] <= 1.5e6
    for name, n in budget["subnets"].items():
        assert abs(n - 3.5e6) / 3.5e6 <= 0.15, name


def test_subnet_isolation(tiny_model64):
    model = tiny_model64.train()
    x = torch.rand(2, 56, 56, 3, dtype=torch.float64) * 255
    out = model(x)
    loss = out.outputs["Age"].sum()
    own = list(model.subnets["Age"].parameters())
    other = list(model.subnets["Hair"].parameters())
    shared = list(model.backbone.parameters())
    grads = torch.autograd.grad(loss, own + other + shared, allow_unused=True)
    g_own, g_other, g_shared = grads[:len(own)], grads[len(own):len(own) + len(other)], grads[len(own) + len(other):]
    assert all(g is None or torch.count_nonzero(g) == 0 for g in g_other)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in g_own)
    assert any(g is not None and torch.count_nonzero(g) > 0 for g in g_shared)


def test_importance_constant_and_provenance():
    alloc = ChannelAllocation((46, 93, 186, 187))
    assert importance_report(np.ones((5, 512)), alloc) == [1.0, 1.0, 1.0, 1.0]
    prov = np.array(alloc.provenance, dtype=float)
    assert importance_report(np.tile(prov, (3, 1)), alloc) == [0.0, 1.0, 2.0, 3.0]
    with pytest.raises(ShapeError):
        importance_report(np.ones((2, 511)), alloc)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 40), min_size=1, max_size=4), st.integers(1, 6), st.integers(0, 2**31))
def test_importance_matches_brute_force(per_level, n, seed):
    alloc = ChannelAllocation(tuple(per_level), tuple(range(len(per_level))))
    acts = np.random.default_rng(seed).exponential(size=(n, alloc.total))
    scores = importance_report(acts, alloc)
    prov = alloc.provenance
    for lvl, s in enumerate(scores):
        vals = [acts[i, c] for i in range(n) for c in range(alloc.total) if prov[c] == lvl]
        assert s == math.fsum(vals) / len(vals)
        assert s >= 0
