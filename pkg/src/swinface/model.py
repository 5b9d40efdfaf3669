"""Shared backbone + recognition subnet + grouped analysis subnets."""
from __future__ import annotations

from typing import Dict, NamedTuple, Optional, Sequence

import torch
import torch.nn as nn

from .backbone import Backbone, FeaturePyramid
from .config import RunConfig
from .heads import AnalysisSubnet, RecognitionHead, TaskRegistry, default_registry


class ModelOutput(NamedTuple):
    pyramid: FeaturePyramid
    embedding: Optional[torch.Tensor]
    outputs: Dict[str, torch.Tensor]
    activations: Dict[str, torch.Tensor]


class SwinFace(nn.Module):
    def __init__(self, config: RunConfig, num_classes: int, registry: Optional[TaskRegistry] = None):
        super().__init__()
        self.config = config
        self.registry = (registry or default_registry()).select(config.heads.subnets)
        bc, hc = config.backbone, config.heads
        self.backbone = Backbone(bc)
        chans = bc.pyramid_channels
        sides = bc.pyramid_sides
        scales = tuple(s // sides[-1] for s in sides)
        self.recognition = RecognitionHead(chans[-1], hc.embedding_size, hc.recognition_bn)
        self.num_classes = num_classes
        self.class_centers = nn.Parameter(torch.empty(num_classes, self.recognition.embedding_size))
        nn.init.normal_(self.class_centers, std=0.01)
        # subnets draw their weights last so everything above is independent of the subnet set and mode
        self.subnets = nn.ModuleDict({
            name: AnalysisSubnet(name, self.registry.subnet_tasks(name), chans, scales, hc.fused_width,
                                 hc.hidden_width, hc.ca_reduction, hc.mlca_mode)
            for name in self.registry.subnets
        })

    def forward(self, images: torch.Tensor, subnets: Optional[Sequence[str]] = None,
                recognition: bool = True) -> ModelOutput:
        pyr = self.backbone(images)
        emb = self.recognition(pyr.fm4) if recognition else None
        outputs, acts = {}, {}
        for name in (self.subnets.keys() if subnets is None else subnets):
            res = self.subnets[name](pyr)
            outputs.update(res.outputs)
            acts[name] = res.activation
        return ModelOutput(pyr, emb, outputs, acts)


def build_model(config: RunConfig, num_classes: int, seed: int = 0) -> SwinFace:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SwinFace(config, num_classes)
    if config.train.dtype == "float64":
        model = model.double()
    return model


def parameter_budget(model: SwinFace) -> dict:
    count = lambda m: sum(p.numel() for p in m.parameters())  # noqa: E731
    return {
        "backbone": count(model.backbone),
        "recognition": count(model.recognition),
        "subnets": {k: count(v) for k, v in model.subnets.items()},
        "class_centers": model.class_centers.numel(),
    }
