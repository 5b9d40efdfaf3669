from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from swinface.config import tiny_config
from swinface.data import SPECS, generate_synthetic, load_manifest
from swinface.model import build_model

torch.set_num_threads(1)


def tiny(**train):
    cfg = tiny_config()
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **train))


def tiny64(**train):
    return tiny(dtype="float64", **train)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_tiny")
    generate_synthetic(SPECS["tiny"], out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(synth_root):
    return load_manifest(synth_root / "manifest.jsonl", image_size=56)


@pytest.fixture(scope="session")
def micro_root(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_micro")
    generate_synthetic(SPECS["micro"], out)
    return out


@pytest.fixture(scope="session")
def micro_dataset(micro_root):
    return load_manifest(micro_root / "manifest.jsonl", image_size=56)


@pytest.fixture
def tiny_model64():
    return build_model(tiny64(), num_classes=16, seed=0)


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory, tiny_dataset):
    """The 500-step tiny multi-task run shared by the overfit and importance checks."""
    from swinface.train import fit, read_metric_log

    out = tmp_path_factory.mktemp("overfit")
    cfg = tiny(from_scratch=True, out_dir=str(out))
    ckpt = fit(cfg, tiny_dataset)
    return {"checkpoint": ckpt, "out_dir": out, "log": read_metric_log(out / "metrics.jsonl"), "config": cfg}


def directional_gradcheck(f, params, seed=0, eps=1e-5):
    """Relative error between the analytic and central-difference directional derivative."""
    gen = torch.Generator().manual_seed(7919 + seed)
    dirs = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
    norm = torch.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    for p in params:
        p.grad = None
    out = f()
    grads = torch.autograd.grad(out, params, allow_unused=True)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs) if g is not None)
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p.add_(eps * d)
        up = float(f())
        for p, d in zip(params, dirs):
            p.sub_(2 * eps * d)
        down = float(f())
        for p, d in zip(params, dirs):
            p.add_(eps * d)
    numeric = (up - down) / (2 * eps)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12), analytic, numeric


@pytest.fixture
def rng():
    return np.random.default_rng(0)
