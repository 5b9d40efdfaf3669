"""Baseline / MLFF / MLFF+CA comparison on the synthetic corpus with shared seeds.

    python3 scripts/run_ablation.py --steps 500 --out runs/ablation
"""
import argparse
import dataclasses
import json
from pathlib import Path

import torch

from swinface.cli import run_ablation
from swinface.config import tiny_config
from swinface.data import SPECS, generate_synthetic


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)

    out = Path(args.out)
    manifest = out / "data" / "manifest.jsonl"
    if not manifest.exists():
        generate_synthetic(SPECS["tiny"], out / "data")
    cfg = tiny_config()
    cfg = dataclasses.replace(
        cfg,
        data=dataclasses.replace(cfg.data, manifests=[str(manifest)]),
        train=dataclasses.replace(cfg.train, total_steps=args.steps, warmup_steps=max(1, args.steps // 10),
                                  checkpoint_interval=args.steps, seed=args.seed, from_scratch=True))
    result = run_ablation(cfg, out)
    (out / "ablation.json").write_text(json.dumps(result["rows"], indent=2) + "\n")
    print(result["table"])


if __name__ == "__main__":
    main()
