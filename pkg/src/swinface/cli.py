"""Command-line entry point.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.

Paths may also come from the environment: ``SWINFACE_DATA`` (default
manifest) and ``SWINFACE_RUNS`` (root directory for run outputs).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from .config import MLCA_MODES, RunConfig, load_config
from .data.manifest import load_manifests, read_image, resize
from .data.synth import SPECS, generate_synthetic
from .errors import ConfigError, RegistryError, SwinFaceError
from .evaluation import importance_table, latency_report, predict, predict_images, task_metrics
from .heads import ATTRIBUTES, EXPRESSIONS
from .train import finetune_config, finetune_subnet, fit, model_from_checkpoint

log = logging.getLogger("swinface")


class UsageError(SwinFaceError):
    """Bad invocation: maps to exit status 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- helpers

def _manifests(args) -> List[str]:
    paths = list(getattr(args, "data", None) or [])
    if not paths and os.environ.get("SWINFACE_DATA"):
        paths = os.environ["SWINFACE_DATA"].split(os.pathsep)
    return paths


def _default_out(name: str) -> str:
    return str(Path(os.environ.get("SWINFACE_RUNS", "runs")) / name)


def _resolve_config(args, phase: Optional[str] = None) -> RunConfig:
    cfg = load_config(args.config, args.set)
    data = dataclasses.replace(cfg.data, manifests=_manifests(args) or list(cfg.data.manifests))
    train = cfg.train
    if phase:
        train = dataclasses.replace(train, phase=phase)
    if getattr(args, "out", None):
        train = dataclasses.replace(train, out_dir=args.out)
    elif "out_dir" not in " ".join(args.set or []) and train.out_dir == "runs/default":
        train = dataclasses.replace(train, out_dir=_default_out(phase or "run"))
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "init_checkpoint", None):
        train = dataclasses.replace(train, init_checkpoint=args.init_checkpoint)
    if getattr(args, "from_scratch", False):
        train = dataclasses.replace(train, from_scratch=True)
    heads = cfg.heads
    if getattr(args, "subnets", None):
        heads = dataclasses.replace(heads, subnets=tuple(args.subnets.split(",")))
    if getattr(args, "mlca_mode", None):
        heads = dataclasses.replace(heads, mlca_mode=args.mlca_mode)
    return dataclasses.replace(cfg, data=data, train=train, heads=heads).validate()


def _emit(obj, out: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
        log.info("wrote %s", out)
    print(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def _load(args):
    model, ckpt = model_from_checkpoint(args.checkpoint)
    if getattr(args, "subnets", None):
        names = args.subnets.split(",")
        for n in names:
            if n not in model.subnets:
                raise RegistryError(f"unknown subnet {n!r}; known: {sorted(model.subnets.keys())}")
    return model, ckpt


def _dataset_for(model, args):
    paths = _manifests(args)
    if not paths:
        raise UsageError("no data: pass --data or set SWINFACE_DATA")
    cfg = model.config
    return load_manifests(paths, cfg.backbone.image_size, cfg.data.align)


def evaluate_checkpoint(checkpoint, dataset, subnets=None) -> dict:
    model, ckpt = model_from_checkpoint(checkpoint)
    cfg = model.config
    pred = predict(model, dataset, cfg.eval.batch_size, cfg.losses.age_sigma)
    if subnets:
        pred.outputs = {k: v for k, v in pred.outputs.items() if model.registry.tasks[k].subnet in subnets}
    return {
        "checkpoint": str(checkpoint),
        "step": ckpt["step"],
        "phase": ckpt["phase"],
        "config_hash": ckpt["config_hash"],
        "metrics": task_metrics(pred, cfg.eval.folds, cfg.eval.far_targets),
    }


def ablation_row(mode: str, report: dict) -> dict:
    m = report["metrics"]
    return {
        "mode": mode,
        "expression_accuracy": m.get("expression", {}).get("accuracy"),
        "age_epsilon_error": m.get("age", {}).get("epsilon_error"),
        "age_mae": m.get("age", {}).get("mae"),
        "attribute_mean_accuracy": m.get("attributes", {}).get("mean_accuracy"),
    }


def format_table(rows) -> str:
    cols = ["mode", "expression_accuracy", "age_epsilon_error", "age_mae", "attribute_mean_accuracy"]
    fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)  # noqa: E731
    cells = [cols] + [[fmt(r[c]) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)


def infer_records(model, paths: List[str], batch_size: int = 32):
    """One record per input path; unreadable files yield an ``error`` entry."""
    size = model.config.backbone.image_size
    images, ok, records = [], [], [None] * len(paths)
    for i, p in enumerate(paths):
        try:
            images.append(resize(read_image(p), size))
            ok.append(i)
        except Exception as exc:  # per-image failure must not stop the run
            records[i] = {"image": str(p), "error": f"{type(exc).__name__}: {exc}"}
    if ok:
        emb, outs, _ = predict_images(model, np.stack(images), batch_size)
        for k, i in enumerate(ok):
            records[i] = {"image": str(paths[i]), "outputs": output_record(emb[k], {n: v[k] for n, v in outs.items()})}
    return records


def output_record(embedding: np.ndarray, outputs: dict) -> dict:
    """Named outputs: embedding, Expression, Age and every available attribute."""
    rec = {"embedding": [float(v) for v in embedding]}
    if "Expression" in outputs:
        p = torch.softmax(torch.from_numpy(outputs["Expression"]).double(), -1).numpy()
        rec["Expression"] = {"label": EXPRESSIONS[int(np.argmax(p))],
                             "probabilities": {e: float(q) for e, q in zip(EXPRESSIONS, p)}}
    if "Age" in outputs:
        rec["Age"] = float(outputs["Age"][0])
    for name in ATTRIBUTES:
        if name in outputs:
            p = float(torch.softmax(torch.from_numpy(outputs[name]).double(), -1)[1])
            rec[name] = {"probability": p, "present": p >= 0.5}
    return rec


# --------------------------------------------------------------------------- subcommands

def cmd_synth_data(args) -> int:
    spec = dataclasses.replace(SPECS[args.spec], seed=args.seed)
    path = generate_synthetic(spec, args.out)
    _emit({"manifest": str(path), "records": spec.total, "spec": args.spec, "seed": args.seed}, None)
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args, "pretrain")
    path = fit(cfg, resume=args.resume)
    _emit({"checkpoint": str(path)}, None)
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args, "multitask")
    path = fit(cfg, resume=args.resume, checkpoint_eval=args.checkpoint_eval)
    _emit({"checkpoint": str(path)}, None)
    return 0


def cmd_finetune(args) -> int:
    model, ckpt = _load(args)
    base = model.config
    overrides = list(args.set or [])
    if args.config:
        cfg = load_config(args.config, overrides)
    else:
        cfg = _apply(finetune_config(base), overrides)
    cfg = dataclasses.replace(cfg, train=dataclasses.replace(
        cfg.train, out_dir=args.out or _default_out("finetune")))
    dataset = _dataset_for(model, args)
    path = finetune_subnet(args.checkpoint, args.subnet, dataset, cfg)
    _emit({"checkpoint": str(path)}, None)
    return 0


def _apply(cfg: RunConfig, overrides) -> RunConfig:
    import yaml
    from .config import _set_path
    tree = cfg.to_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    return RunConfig.from_dict(tree).validate()


def cmd_eval(args) -> int:
    model, _ = _load(args)
    dataset = _dataset_for(model, args)
    subnets = args.subnets.split(",") if args.subnets else None
    report = evaluate_checkpoint(args.checkpoint, dataset, subnets)
    if args.latency:
        report["latency"] = latency_report(model, args.latency_batch, args.latency_trials)
    _emit(report, args.out)
    return 0


def cmd_infer(args) -> int:
    model, _ = _load(args)
    records = infer_records(model, args.images, args.batch_size)
    lines = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    return 0


def cmd_inspect_importance(args) -> int:
    model, ckpt = _load(args)
    dataset = _dataset_for(model, args)
    pred = predict(model, dataset, model.config.eval.batch_size, model.config.losses.age_sigma)
    table = importance_table(model, pred)
    if args.subnets:
        table = {k: v for k, v in table.items() if k in args.subnets.split(",")}
    _emit({"checkpoint": str(args.checkpoint), "config_hash": ckpt["config_hash"], "importance": table}, args.out)
    return 0


def run_ablation(cfg: RunConfig, out_dir, modes=("baseline_top_only", "mlff_only", "mlff_ca")) -> dict:
    """Train and evaluate one run per MLCA mode with identical seeds and data."""
    out_dir = Path(out_dir)
    dataset = load_manifests(cfg.data.manifests, cfg.backbone.image_size, cfg.data.align)
    rows = []
    for mode in modes:
        run_cfg = dataclasses.replace(
            cfg, heads=dataclasses.replace(cfg.heads, mlca_mode=mode),
            train=dataclasses.replace(cfg.train, out_dir=str(out_dir / mode)))
        ckpt = fit(run_cfg, dataset)
        rows.append(ablation_row(mode, evaluate_checkpoint(ckpt, dataset)))
    return {"rows": rows, "table": format_table(rows)}


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args, "multitask")
    if not cfg.data.manifests:
        raise UsageError("no data: pass --data or set SWINFACE_DATA")
    result = run_ablation(cfg, args.out or _default_out("ablate"))
    print(result["table"], file=sys.stderr)
    _emit(result["rows"], str(Path(args.out or _default_out("ablate")) / "ablation.json"))
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="swinface", description="Multi-task face recognition and analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", default="tiny", help="preset name (tiny, canonical) or YAML file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override, e.g. train.total_steps=100 (repeatable)")
        sp.add_argument("--data", action="append", help="manifest path (repeatable)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth-data", help="generate a synthetic corpus")
    sp.add_argument("--spec", choices=sorted(SPECS), default="tiny")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth_data)

    sp = sub.add_parser("pretrain", help="recognition-only pre-training")
    config_args(sp)
    sp.add_argument("--resume")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train", help="multi-task training")
    config_args(sp)
    sp.add_argument("--init-checkpoint", dest="init_checkpoint")
    sp.add_argument("--from-scratch", action="store_true")
    sp.add_argument("--subnets", help="comma-separated subnet filter")
    sp.add_argument("--mlca-mode", choices=MLCA_MODES)
    sp.add_argument("--resume")
    sp.add_argument("--checkpoint-eval", action="store_true", help="log train-set metrics at checkpoints")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune one analysis subnet")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subnet", required=True)
    sp.add_argument("--config", help="preset or YAML (default: checkpoint config, 4000 steps, no warm-up)")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    sp.add_argument("--data", action="append")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", action="append")
    sp.add_argument("--subnets")
    sp.add_argument("--out", help="report file (JSON)")
    sp.add_argument("--latency", action="store_true")
    sp.add_argument("--latency-batch", type=int, default=32)
    sp.add_argument("--latency-trials", type=int, default=20)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="per-image outputs as JSON lines")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--out")
    sp.add_argument("images", nargs="+")
    sp.set_defaults(func=cmd_infer, subnets=None)

    sp = sub.add_parser("inspect-importance", help="per-level channel importance")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", action="append")
    sp.add_argument("--subnets")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_inspect_importance)

    sp = sub.add_parser("ablate", help="baseline / MLFF / MLFF+CA comparison")
    config_args(sp)
    sp.set_defaults(func=cmd_ablate, from_scratch=True)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        return args.func(args)
    except (UsageError, ConfigError, RegistryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
