import dataclasses
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import directional_gradcheck, tiny, tiny64
from swinface.config import canonical_config
from swinface.data import compose_batch, split_sources
from swinface.data.manifest import Dataset
from swinface.errors import ConfigError, NonFiniteLossError, RegistryError
from swinface.evaluation import predict
from swinface.heads import ATTRIBUTES
from swinface.train import (compute_losses, finetune_config, finetune_subnet, fit, load_checkpoint,
                            lr_schedule, make_optimizer, model_from_checkpoint, read_metric_log,
                            save_checkpoint, trainable_parameters)

VOLATILE = ("seconds", "wall_time")


def _steps(log):
    return {r["step"]: {k: v for k, v in r.items() if k not in VOLATILE} for r in log if "event" not in r}


def _state_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# --------------------------------------------------------------------------- schedule

def test_canonical_lr_boundaries():
    tc = canonical_config().train
    assert (tc.total_steps, tc.warmup_steps) == (80000, 8000)
    assert lr_schedule(0, tc) == 5e-7
    assert lr_schedule(8000, tc) == 5e-4
    assert lr_schedule(80000, tc) == 5e-6
    assert lr_schedule(-3, tc) == 5e-7 and lr_schedule(10**6, tc) == 5e-6


def test_lr_without_warmup():
    tc = dataclasses.replace(canonical_config().train, warmup_steps=0, total_steps=4000, min_lr=5e-7)
    assert lr_schedule(0, tc) == 5e-4 and lr_schedule(4000, tc) == 5e-7


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.integers(0, 499), st.integers(0, 600))
def test_lr_shape(total, warmup, step):
    warmup = min(warmup, total - 1)
    tc = dataclasses.replace(tiny().train, total_steps=total, warmup_steps=warmup)
    lr, nxt = lr_schedule(step, tc), lr_schedule(step + 1, tc)
    assert min(tc.warmup_lr, tc.min_lr) <= lr <= tc.peak_lr
    if step + 1 <= warmup:
        assert nxt >= lr
    elif step >= warmup:
        assert nxt <= lr


def test_finetune_defaults():
    tc = finetune_config(canonical_config()).train
    assert (tc.phase, tc.total_steps, tc.warmup_steps, tc.min_lr) == ("finetune", 4000, 0, 5e-7)


# --------------------------------------------------------------------------- losses and routing

@pytest.fixture
def tiny_batch(tiny_dataset):
    return compose_batch(split_sources(tiny_dataset), 8, seed=0, step=0, augment_mode="flip_only")


def test_initial_losses_finite_and_positive(tiny_model64, tiny_batch):
    bundle = compute_losses(tiny_model64.train(), tiny_batch, tiny64(), 0, 0.0, "multitask")
    values = bundle.values()
    assert set(values) == {"Recognition", "Expression", "Age", *ATTRIBUTES}
    assert all(np.isfinite(v) and v > 0 for v in values.values())
    assert bundle.counts["Recognition"] == 8 and bundle.counts["Male"] >= 8


def test_pretrain_phase_has_recognition_only(tiny_model64, tiny_batch):
    bundle = compute_losses(tiny_model64, tiny_batch, tiny64(), 0, 0.0, "pretrain")
    assert set(bundle.values()) == {"Recognition"}


def test_finetune_phase_routes_only_named_subnet(tiny_model64, tiny_batch):
    bundle = compute_losses(tiny_model64, tiny_batch, tiny64(), 0, 0.5, "finetune", subnets=["Age"])
    assert set(bundle.values()) == {"Age", "Young"}


def test_non_finite_loss_names_task(tiny_model64, tiny_batch):
    with torch.no_grad():
        for p in tiny_model64.subnets["Age"].parameters():
            p.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as err:
        compute_losses(tiny_model64, tiny_batch, tiny64(), 0, 0.0, "multitask")
    assert err.value.task in ("Age", "Young")


def test_trainable_parameter_scopes(tiny_model64):
    names = lambda ps: {n for n, _ in ps}  # noqa: E731
    pre = names(trainable_parameters(tiny_model64, "pretrain"))
    assert pre and not any(n.startswith("subnets.") for n in pre)
    ft = names(trainable_parameters(tiny_model64, "finetune", "Age"))
    assert ft and all(n.startswith("subnets.Age.") for n in ft)
    everything = names(trainable_parameters(tiny_model64, "multitask"))
    assert everything == {n for n, _ in tiny_model64.named_parameters()}


def test_weight_decay_groups(tiny_model64):
    opt = make_optimizer(trainable_parameters(tiny_model64, "multitask"), tiny64().train)
    decay, no_decay = opt.param_groups
    assert decay["weight_decay"] == 0.05 and no_decay["weight_decay"] == 0.0
    assert all(p.ndim >= 2 for p in decay["params"])
    assert opt.defaults["betas"] == (0.9, 0.999)


def test_full_step_gradient(tiny_model64, tiny_batch):
    model = tiny_model64.train()
    cfg = tiny64()
    params = [p for p in model.parameters()]

    def loss():
        torch.manual_seed(0)
        return compute_losses(model, tiny_batch, cfg, 10, 0.5, "multitask", rng=np.random.default_rng(0)).total

    err, analytic, _ = directional_gradcheck(loss, params)
    assert err <= 1e-4 and abs(analytic) > 0


# --------------------------------------------------------------------------- fit guards and checkpoints

def test_multitask_needs_checkpoint(tiny_dataset, tmp_path):
    with pytest.raises(ConfigError, match="from_scratch"):
        fit(tiny(out_dir=str(tmp_path)), tiny_dataset)


def test_multitask_needs_all_categories(tiny_dataset, tmp_path):
    only_ids = Dataset(list(tiny_dataset.filter("identity")), tiny_dataset.root, 56)
    with pytest.raises(ConfigError, match="four"):
        fit(tiny(from_scratch=True, out_dir=str(tmp_path)), only_ids)


def test_reload_is_bit_identical(tiny_model64, tmp_path):
    model = tiny_model64.eval()
    path = save_checkpoint(tmp_path / "c.pt", model, None, tiny64(), "multitask", 0)
    assert not list(tmp_path.glob("*.tmp"))
    again, ckpt = model_from_checkpoint(path)
    again.eval()
    assert ckpt["num_classes"] == 16 and ckpt["config_hash"] == tiny64().config_hash()
    x = torch.rand(3, 56, 56, 3, dtype=torch.float64) * 255
    a, b = model(x), again(x)
    assert torch.equal(a.embedding, b.embedding)
    assert all(torch.equal(a.outputs[k], b.outputs[k]) for k in a.outputs)


def test_checkpoint_version_guard(tiny_model64, tmp_path):
    path = save_checkpoint(tmp_path / "c.pt", tiny_model64, None, tiny64(), "multitask", 0)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ConfigError):
        load_checkpoint(path)


# --------------------------------------------------------------------------- determinism and resume

def _micro_cfg(out, **train):
    cfg = tiny64(from_scratch=True, total_steps=50, warmup_steps=5, checkpoint_interval=25,
                 out_dir=str(out), **train)
    # four identities: every center is sampled so a batch never holds more identities than centers
    return dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, per_category=4),
                               losses=dataclasses.replace(cfg.losses, sampling_ratio=1.0))


@pytest.fixture(scope="module")
def micro_runs(micro_dataset, tmp_path_factory):
    a = tmp_path_factory.mktemp("run_a")
    b = tmp_path_factory.mktemp("run_b")
    r = tmp_path_factory.mktemp("run_resumed")
    ca = fit(_micro_cfg(a), micro_dataset)
    cb = fit(_micro_cfg(b), micro_dataset)
    cr = fit(_micro_cfg(r), micro_dataset, resume=str(a / "checkpoints" / "step_0000025.pt"))
    return {k: (d, c) for k, d, c in (("a", a, ca), ("b", b, cb), ("resumed", r, cr))}


def test_same_seed_runs_identical(micro_runs):
    (a, ca), (b, cb) = micro_runs["a"], micro_runs["b"]
    la, lb = _steps(read_metric_log(a / "metrics.jsonl")), _steps(read_metric_log(b / "metrics.jsonl"))
    assert len(la) == 50 and la == lb
    assert _state_equal(load_checkpoint(ca)["model"], load_checkpoint(cb)["model"])


def test_resume_matches_uninterrupted(micro_runs):
    (a, ca), (r, cr) = micro_runs["a"], micro_runs["resumed"]
    la, lr_ = _steps(read_metric_log(a / "metrics.jsonl")), _steps(read_metric_log(r / "metrics.jsonl"))
    assert sorted(lr_) == list(range(25, 50))
    assert all(lr_[s] == la[s] for s in lr_)
    assert _state_equal(load_checkpoint(ca)["model"], load_checkpoint(cr)["model"])
    assert _state_equal(load_checkpoint(ca)["optimizer"]["state"][0], load_checkpoint(cr)["optimizer"]["state"][0])


def test_resume_from_300_of_overfit_run(overfit_run, tiny_dataset, tmp_path):
    src = overfit_run["out_dir"] / "checkpoints" / "step_0000300.pt"
    shutil.copy(src, tmp_path / "start.pt")
    cfg = dataclasses.replace(overfit_run["config"], train=dataclasses.replace(
        overfit_run["config"].train, out_dir=str(tmp_path / "resumed")))
    final = fit(cfg, tiny_dataset, resume=str(tmp_path / "start.pt"))
    full = _steps(overfit_run["log"])
    resumed = _steps(read_metric_log(tmp_path / "resumed" / "metrics.jsonl"))
    assert sorted(resumed) == list(range(300, 500))
    for step, rec in resumed.items():
        for task, value in rec["losses"].items():
            assert abs(value - full[step]["losses"][task]) <= 1e-10, (step, task)
    assert _state_equal(load_checkpoint(final)["model"], load_checkpoint(overfit_run["checkpoint"])["model"])


# --------------------------------------------------------------------------- the shared 500-step run

def test_overfit_run_checkpoints(overfit_run):
    events = [r for r in overfit_run["log"] if r.get("event") == "checkpoint"]
    assert [e["step"] for e in events] == [100, 200, 300, 400, 500]
    assert len(list((overfit_run["out_dir"] / "checkpoints").glob("step_*.pt"))) >= 5
    rec = next(r for r in overfit_run["log"] if "event" not in r)
    assert {"step", "lr", "lambda", "losses", "wall_time", "total"} <= set(rec)


def test_loss_decreases_over_300_steps(overfit_run):
    totals = [r["total"] for r in sorted(_steps(overfit_run["log"]).values(), key=lambda r: r["step"])][:300]
    assert np.mean(totals[200:]) < np.mean(totals[:100])


# --------------------------------------------------------------------------- fine-tuning

@pytest.fixture(scope="module")
def weak_checkpoint(tiny_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("weak")
    return fit(tiny(from_scratch=True, total_steps=20, warmup_steps=2, checkpoint_interval=20,
                    out_dir=str(out)), tiny_dataset)


def test_finetune_age(weak_checkpoint, tiny_dataset, tmp_path):
    ages = Dataset(list(tiny_dataset.filter("age_gender"))[:32], tiny_dataset.root, 56)
    before = load_checkpoint(weak_checkpoint)["model"]
    cfg = tiny(phase="finetune", total_steps=200, warmup_steps=0, min_lr=5e-7, checkpoint_interval=25,
               out_dir=str(tmp_path))
    # full-batch and unaugmented, so each step descends the very objective the checkpoints measure
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, per_category=32, augment="none"))
    final = finetune_subnet(weak_checkpoint, "Age", ages, cfg)
    after = load_checkpoint(final)["model"]
    for k in before:
        if k.startswith("subnets.Age."):
            continue
        assert torch.equal(before[k], after[k]), k
    assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("subnets.Age."))
    maes = [r["eval"]["age"]["mae"] for r in read_metric_log(tmp_path / "metrics.jsonl")
            if r.get("event") == "checkpoint"]
    assert len(maes) == 8
    # plateau: changes under 0.01 years (about four days) count as flat
    assert all(b <= a + 0.01 for a, b in zip(maes, maes[1:])), maes
    assert maes[-1] < 0.1 * maes[0], maes
    model, _ = model_from_checkpoint(final)
    assert predict(model, ages).outputs["Age"].shape == (32, 1)


def test_finetune_unknown_subnet(weak_checkpoint, tiny_dataset, tmp_path):
    with pytest.raises(RegistryError):
        finetune_subnet(weak_checkpoint, "Tail", tiny_dataset, tiny(phase="finetune", out_dir=str(tmp_path)))
