"""Recognition-only vs all-outputs forward time and the resulting overhead.

    python3 scripts/measure_latency.py --config canonical --batch 32 --trials 20
"""
import argparse
import json

import torch

from swinface.config import load_config
from swinface.evaluation import latency_report
from swinface.model import build_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="canonical", help="preset name or YAML file")
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()
    torch.set_num_threads(args.threads)
    cfg = load_config(args.config)
    model = build_model(cfg, num_classes=cfg.losses.num_classes or 10)
    print(json.dumps(latency_report(model, args.batch, args.trials), indent=2))


if __name__ == "__main__":
    main()
