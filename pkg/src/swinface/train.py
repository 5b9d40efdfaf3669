"""Pre-training, multi-task training and subnet fine-tuning loops."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .config import RunConfig, TrainConfig
from .data.manifest import Dataset, load_manifests
from .data.sampler import CompositeBatch, compose_batch, split_sources
from .errors import ConfigError, NonFiniteLossError, RegistryError
from .evaluation import images_to_tensor, predict, task_metrics
from .heads import ATTRIBUTE_INDEX
from .losses import (LossBundle, age_loss, attribute_loss, binary_probability, cosface_loss,
                     expression_loss, lambda_schedule, pfc_sample, total_loss)
from .model import SwinFace, build_model

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warm-up from ``warmup_lr`` to ``peak_lr``, then cosine decay to ``min_lr``.

    Boundary steps return the configured values exactly.
    """
    step = min(max(step, 0), config.total_steps)
    w = config.warmup_steps
    if step < w:
        t = step / w
        return (1.0 - t) * config.warmup_lr + t * config.peak_lr
    span = config.total_steps - w
    t = (step - w) / span if span > 0 else 1.0
    c = 0.5 * (1.0 + math.cos(math.pi * t))
    return c * config.peak_lr + (1.0 - c) * config.min_lr


def _step_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step, 3]).generate_state(1)[0])


def compute_losses(model: SwinFace, batch: CompositeBatch, config: RunConfig, step: int,
                   lam: float, phase: str, subnets=None, rng: Optional[np.random.Generator] = None,
                   x: Optional[torch.Tensor] = None) -> LossBundle:
    """Forward the composite batch and route every sample to the losses its labels support."""
    lc = config.losses
    dtype = next(model.parameters()).dtype
    if x is None:
        x = images_to_tensor(batch.images, dtype)
    rows = batch.task_rows()
    rng = rng if rng is not None else np.random.default_rng([config.train.seed, step, 2])
    losses: Dict[str, torch.Tensor] = {}
    counts: Dict[str, int] = {}

    pyr = model.backbone(x)
    if phase != "finetune" and rows["identity"].size:
        r = rows["identity"]
        emb = model.recognition(pyr.fm4[r])
        labels = torch.from_numpy(batch.identity[r])
        sampled = pfc_sample(model.num_classes, batch.identity[r], lc.sampling_ratio, rng)
        losses["Recognition"] = cosface_loss(emb, labels, model.class_centers, lc.scale, lc.margin,
                                             sampled, lc.margin_type)
        counts["Recognition"] = int(r.size)

    if phase != "pretrain":
        names = list(model.subnets.keys()) if subnets is None else list(subnets)
        ana = np.flatnonzero(batch.category != 0)
        if ana.size and names:
            sub_pyr = type(pyr)(*(f[ana] for f in pyr))
            pos = {int(r): k for k, r in enumerate(ana)}
            outputs = {}
            for name in names:
                outputs.update(model.subnets[name](sub_pyr).outputs)
            local = lambda rr: torch.as_tensor([pos[int(i)] for i in rr], dtype=torch.long)  # noqa: E731
            if "Expression" in outputs and rows["expression"].size:
                r = rows["expression"]
                losses["Expression"] = expression_loss(outputs["Expression"][local(r)],
                                                       torch.from_numpy(batch.expression[r]))
                counts["Expression"] = int(r.size)
            if "Age" in outputs and rows["age"].size:
                r = rows["age"]
                pred = outputs["Age"][local(r), 0]
                losses["Age"] = age_loss(pred, torch.from_numpy(batch.age[r]).to(pred.dtype),
                                         torch.from_numpy(batch.age_sigma[r]).to(pred.dtype), lam)
                counts["Age"] = int(r.size)
            attrs = batch.attributes[ana]
            for name, logits in outputs.items():
                j = ATTRIBUTE_INDEX.get(name)
                if j is None:
                    continue
                m = np.flatnonzero(attrs[:, j] >= 0)
                if m.size:
                    idx = torch.from_numpy(m)
                    losses[name] = attribute_loss(binary_probability(logits[idx]),
                                                  torch.from_numpy(attrs[m, j].astype(np.int64)), lc.prob_clamp)
                    counts[name] = int(m.size)

    for name, value in losses.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value.detach()))
    return total_loss(losses, counts, lc.task_weights)


def train_step(model: SwinFace, optimizer: torch.optim.Optimizer, batch: CompositeBatch,
               config: RunConfig, step: int, phase: Optional[str] = None, subnets=None) -> dict:
    """One optimisation step at ``lr_schedule(step)`` and ``lambda_schedule(step)``."""
    tc = config.train
    phase = phase or tc.phase
    t0 = time.perf_counter()
    lr = lr_schedule(step, tc)
    lam = lambda_schedule(step, tc.total_steps)
    for g in optimizer.param_groups:
        g["lr"] = lr
    torch.manual_seed(_step_seed(tc.seed, step))
    bundle = compute_losses(model, batch, config, step, lam, phase, subnets)
    optimizer.zero_grad(set_to_none=True)
    bundle.total.backward()
    optimizer.step()
    return {
        "step": step,
        "lr": lr,
        "lambda": lam,
        "total": float(bundle.total.detach()),
        "losses": bundle.values(),
        "counts": bundle.counts,
        "seconds": time.perf_counter() - t0,
    }


def make_optimizer(params, config: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in params:
        if not p.requires_grad:
            continue
        if p.ndim <= 1 or name.endswith("relative_position_bias_table") or name.endswith("pos_embed"):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": config.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=config.warmup_lr, betas=config.betas)


def trainable_parameters(model: SwinFace, phase: str, subnet: Optional[str] = None):
    for name, p in model.named_parameters():
        if phase == "pretrain":
            ok = not name.startswith("subnets.")
        elif phase == "finetune":
            ok = name.startswith(f"subnets.{subnet}.")
        else:
            ok = True
        p.requires_grad_(ok)
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: SwinFace, optimizer, config: RunConfig, phase: str, step: int,
                    metrics: Optional[dict] = None) -> Path:
    """Atomic write: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "step": step,
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "num_classes": model.num_classes,
        "registry": model.registry.to_dict(),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng": {"torch": torch.get_rng_state(), "seed": config.train.seed, "step": step},
        "metrics": metrics or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {ckpt.get('format_version')!r} in {path}")
    return ckpt


def model_from_checkpoint(path, config: Optional[RunConfig] = None):
    ckpt = load_checkpoint(path)
    cfg = config or RunConfig.from_dict(ckpt["config"]).validate()
    model = build_model(cfg, ckpt["num_classes"], cfg.train.seed)
    model.load_state_dict(ckpt["model"])
    return model, ckpt


# --------------------------------------------------------------------------- loops

class MetricLog:
    """Append-only JSON-lines log."""

    def __init__(self, path: Path, truncate_from: Optional[int] = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if truncate_from is not None and self.path.exists():
            keep = [l for l in self.path.read_text().splitlines()
                    if l.strip() and json.loads(l).get("step", 0) < truncate_from]
            self.path.write_text("".join(k + "\n" for k in keep))

    def write(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_metric_log(path) -> list:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def _load_dataset(config: RunConfig, dataset: Optional[Dataset]) -> Dataset:
    if dataset is None:
        if not config.data.manifests:
            raise ConfigError("no training data: set data.manifests or pass a dataset")
        dataset = load_manifests(config.data.manifests, config.backbone.image_size, config.data.align)
    elif dataset.image_size != config.backbone.image_size:
        dataset = dataset.with_image_size(config.backbone.image_size)
    return dataset


def _resolve_classes(config: RunConfig, dataset: Dataset) -> RunConfig:
    if config.losses.num_classes is not None:
        return config
    ids = [r.identity for r in dataset if r.identity is not None]
    n = max(ids) + 1 if ids else 1
    return dataclasses.replace(config, losses=dataclasses.replace(config.losses, num_classes=n))


def _run_loop(model, optimizer, config: RunConfig, sources, phase: str, start: int, out_dir: Path,
              subnets=None, eval_dataset: Optional[Dataset] = None, checkpoint_eval: bool = False) -> Path:
    tc = config.train
    mlog = MetricLog(out_dir / "metrics.jsonl", truncate_from=start)
    ckpt_dir = out_dir / "checkpoints"
    last = None
    saved = []
    model.train()
    if phase == "finetune":
        model.eval()
        for name in subnets:
            model.subnets[name].train()
    for step in range(start, tc.total_steps):
        batch = compose_batch(sources, config.data.per_category, tc.seed, step, config.data.augment,
                              config.losses.age_sigma)
        rec = train_step(model, optimizer, batch, config, step, phase, subnets)
        rec["wall_time"] = time.time()
        if step % tc.log_interval == 0 or step + 1 == tc.total_steps:
            mlog.write(rec)
        done = step + 1
        if done % tc.checkpoint_interval == 0 or done == tc.total_steps:
            snapshot = {}
            if checkpoint_eval and eval_dataset is not None:
                snapshot = task_metrics(predict(model, eval_dataset, config.eval.batch_size, config.losses.age_sigma),
                                        config.eval.folds, config.eval.far_targets)
                if phase == "finetune":
                    model.eval()
                    for name in subnets:
                        model.subnets[name].train()
                else:
                    model.train()
            last = save_checkpoint(ckpt_dir / f"step_{done:07d}.pt", model, optimizer, config, phase, done,
                                   {"train": rec, "eval": snapshot})
            mlog.write({"event": "checkpoint", "step": done, "path": str(last), "eval": snapshot})
            saved.append(last)
            if tc.keep_last > 0:
                for old in saved[:-tc.keep_last]:
                    old.unlink(missing_ok=True)
                saved = saved[-tc.keep_last:]
    if last is None:
        raise RuntimeError("no training steps were run")
    return last


def fit(config: RunConfig, dataset: Optional[Dataset] = None, resume: Optional[str] = None,
        checkpoint_eval: bool = False) -> Path:
    """Run the ``pretrain`` or ``multitask`` phase; returns the final checkpoint path.

    Multi-task runs start from ``train.init_checkpoint`` (backbone, recognition
    subnet and class centers) unless ``train.from_scratch`` is set.
    """
    config = config.validate()
    tc = config.train
    phase = tc.phase
    if phase == "finetune":
        raise ConfigError("use finetune_subnet for the finetune phase")
    if phase == "multitask" and not (tc.init_checkpoint or tc.from_scratch or resume):
        raise ConfigError("multitask training needs a pretrain checkpoint (train.init_checkpoint) "
                          "or an explicit scratch run (train.from_scratch / --from-scratch)")
    dataset = _load_dataset(config, dataset)
    config = _resolve_classes(config, dataset)
    if phase == "pretrain":
        sources = split_sources(dataset, ("identity",))
        if tc.epochs is not None:
            per_step = config.data.per_category
            config = dataclasses.replace(config, train=tc.resolve_epochs(
                math.ceil(len(sources["identity"]) / per_step)))
    else:
        sources = split_sources(dataset)
        missing = {"identity", "expression", "age_gender", "attribute"} - set(sources)
        if missing:
            raise ConfigError(f"multitask training needs all four label categories; missing {sorted(missing)}")
    config.validate()
    tc = config.train
    out_dir = Path(tc.out_dir)
    (out_dir).mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    model = build_model(config, config.losses.num_classes, tc.seed)
    start = 0
    if resume:
        ckpt = load_checkpoint(resume)
        model.load_state_dict(ckpt["model"])
        start = int(ckpt["step"])
    elif phase == "multitask" and tc.init_checkpoint and not tc.from_scratch:
        ckpt = load_checkpoint(tc.init_checkpoint)
        state = {k: v for k, v in ckpt["model"].items() if not k.startswith("subnets.")}
        if state["class_centers"].shape != model.class_centers.shape:
            raise ConfigError("pretrain checkpoint has a different identity count")
        model.load_state_dict(state, strict=False)
    optimizer = make_optimizer(trainable_parameters(model, phase), tc)
    if resume:
        optimizer.load_state_dict(ckpt["optimizer"])
    log.info("fit phase=%s steps=%d start=%d out=%s", phase, tc.total_steps, start, out_dir)
    return _run_loop(model, optimizer, config, sources, phase, start, out_dir,
                     eval_dataset=dataset, checkpoint_eval=checkpoint_eval)


def finetune_config(base: RunConfig) -> RunConfig:
    """Fine-tuning defaults on top of a trained run's config: 4000 steps, no warm-up, min lr 5e-7."""
    return dataclasses.replace(base, train=dataclasses.replace(
        base.train, phase="finetune", total_steps=4000, warmup_steps=0, min_lr=5e-7))


def finetune_subnet(checkpoint, subnet_name: str, dataset: Dataset, config: Optional[RunConfig] = None,
                    checkpoint_eval: bool = True) -> Path:
    """Train only ``subnet_name``; backbone, recognition head and other subnets stay frozen."""
    ckpt = load_checkpoint(checkpoint)
    base = RunConfig.from_dict(ckpt["config"])
    if config is None:
        config = finetune_config(base)
    # architecture always follows the checkpoint
    config = dataclasses.replace(config, backbone=base.backbone, heads=base.heads,
                                 losses=dataclasses.replace(config.losses, num_classes=ckpt["num_classes"]))
    config = dataclasses.replace(config, train=dataclasses.replace(config.train, phase="finetune",
                                                                    finetune_subnet=subnet_name)).validate()
    model = build_model(config, ckpt["num_classes"], config.train.seed)
    model.load_state_dict(ckpt["model"])
    if subnet_name not in model.subnets:
        raise RegistryError(f"unknown subnet {subnet_name!r}; known: {sorted(model.subnets.keys())}")
    dataset = _load_dataset(config, dataset)
    sources = split_sources(dataset, ("expression", "age_gender", "attribute"))
    if not sources:
        raise ConfigError("finetune dataset has no analysis-labelled records")
    out_dir = Path(config.train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    optimizer = make_optimizer(trainable_parameters(model, "finetune", subnet_name), config.train)
    return _run_loop(model, optimizer, config, sources, "finetune", 0, out_dir, subnets=[subnet_name],
                     eval_dataset=dataset, checkpoint_eval=checkpoint_eval)
