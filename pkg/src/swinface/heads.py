"""Task registry, recognition subnet, analysis subnets and importance scores."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RegistryError, ShapeError
from .mlca import MLCA, ChannelAllocation

# CelebA listing order; also the order used in inference records.
ATTRIBUTES = (
    "5 o'clock Shadow", "Arched Eyebrows", "Attractive", "Bags Under Eyes", "Bald", "Bangs",
    "Big Lips", "Big Nose", "Black Hair", "Blond Hair", "Blurry", "Brown Hair", "Bushy Eyebrows",
    "Chubby", "Double Chin", "Eyeglasses", "Goatee", "Gray Hair", "Heavy Makeup", "High Cheekbones",
    "Male", "Mouth Slightly Open", "Mustache", "Narrow Eyes", "No Beard", "Oval Face", "Pale Skin",
    "Pointy Nose", "Receding Hairline", "Rosy Cheeks", "Sideburns", "Smiling", "Straight Hair",
    "Wavy Hair", "Wearing Earrings", "Wearing Hat", "Wearing Lipstick", "Wearing Necklace",
    "Wearing Necktie", "Young",
)
ATTRIBUTE_INDEX = {name: i for i, name in enumerate(ATTRIBUTES)}
EXPRESSIONS = ("surprise", "fear", "disgust", "happiness", "sadness", "anger", "neutral")

OUTPUT_WIDTH = {"multiclass": 7, "regression": 1, "binary": 2}

SUBNET_TASKS = {
    "Expression": ("Expression", "Smiling"),
    "Age": ("Age", "Young"),
    "Gender": ("Male",),
    "Whole": ("Attractive", "Blurry", "Chubby", "Heavy Makeup", "Oval Face", "Pale Skin"),
    "Hair": ("Bald", "Bangs", "Black Hair", "Blond Hair", "Brown Hair", "Gray Hair",
             "Receding Hairline", "Straight Hair", "Wavy Hair", "Wearing Hat"),
    "Eyes": ("Arched Eyebrows", "Bags Under Eyes", "Bushy Eyebrows", "Eyeglasses", "Narrow Eyes"),
    "Nose": ("Big Nose", "Pointy Nose"),
    "Cheek": ("High Cheekbones", "Rosy Cheeks", "Wearing Earrings", "Sideburns"),
    "Mouth": ("5 o'clock Shadow", "Big Lips", "Mouth Slightly Open", "Mustache", "Wearing Lipstick",
              "No Beard"),
    "Chin": ("Double Chin", "Goatee"),
    "Neck": ("Wearing Necklace", "Wearing Necktie"),
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    subnet: str

    @property
    def width(self) -> int:
        return OUTPUT_WIDTH[self.kind]

    @property
    def attribute_index(self) -> Optional[int]:
        return ATTRIBUTE_INDEX.get(self.name)


@dataclass(frozen=True)
class TaskRegistry:
    subnets: Dict[str, tuple]
    tasks: Dict[str, TaskSpec]

    def subnet_tasks(self, subnet: str) -> tuple:
        if subnet not in self.subnets:
            raise RegistryError(f"unknown subnet {subnet!r}; known: {sorted(self.subnets)}")
        return tuple(self.tasks[t] for t in self.subnets[subnet])

    def select(self, names: Optional[Sequence[str]]) -> "TaskRegistry":
        if names is None:
            return self
        for n in names:
            self.subnet_tasks(n)
        subnets = {k: v for k, v in self.subnets.items() if k in names}
        tasks = {t: self.tasks[t] for v in subnets.values() for t in v}
        return TaskRegistry(subnets, tasks)

    def to_dict(self) -> dict:
        return {s: [{"name": t.name, "kind": t.kind} for t in self.subnet_tasks(s)] for s in self.subnets}


def default_registry() -> TaskRegistry:
    tasks = {}
    for subnet, names in SUBNET_TASKS.items():
        for name in names:
            kind = {"Expression": "multiclass", "Age": "regression"}.get(name, "binary")
            tasks[name] = TaskSpec(name, kind, subnet)
    return TaskRegistry(dict(SUBNET_TASKS), tasks)


class RecognitionHead(nn.Module):
    """Global average pool of the deepest tap, then FC-BN-FC-BN.

    With ``use_bn=False`` the pooled feature is returned unchanged.
    """

    def __init__(self, in_channels: int, embedding_size: int = 512, use_bn: bool = True):
        super().__init__()
        self.in_channels = in_channels
        self.use_bn = use_bn
        if use_bn:
            self.fc1 = nn.Linear(in_channels, embedding_size)
            self.bn1 = nn.BatchNorm1d(embedding_size)
            self.fc2 = nn.Linear(embedding_size, embedding_size)
            self.bn2 = nn.BatchNorm1d(embedding_size)
            self.embedding_size = embedding_size
        else:
            self.embedding_size = in_channels

    def forward(self, fm4: torch.Tensor) -> torch.Tensor:
        if fm4.ndim != 4 or fm4.shape[-1] != self.in_channels:
            raise ShapeError(f"recognition head expects (B, H, W, {self.in_channels}), got {tuple(fm4.shape)}")
        x = fm4.mean(dim=(1, 2))
        if not self.use_bn:
            return x
        return self.bn2(self.fc2(self.bn1(self.fc1(x))))


class SubnetOutput(NamedTuple):
    outputs: Dict[str, torch.Tensor]
    activation: torch.Tensor


class AnalysisSubnet(nn.Module):
    """MLCA -> spatial max pool -> ReLU -> 2 x (FC + ReLU) -> one FC per task."""

    def __init__(self, name: str, tasks: Sequence[TaskSpec], pyramid_channels, pyramid_scales,
                 width: int = 512, hidden: int = 512, reduction: int = 16, mode: str = "mlff_ca"):
        super().__init__()
        self.name = name
        self.task_names = tuple(t.name for t in tasks)
        self.mlca = MLCA(pyramid_channels, pyramid_scales, width, reduction, mode)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        # ModuleDict keys may not contain '.', so index by position
        self.out = nn.ModuleList(nn.Linear(hidden, t.width) for t in tasks)

    @property
    def allocation(self) -> ChannelAllocation:
        return self.mlca.allocation

    def forward(self, pyramid) -> SubnetOutput:
        x = self.mlca(pyramid)
        act = F.relu(x.amax(dim=(1, 2)))
        h = F.relu(self.fc2(F.relu(self.fc1(act))))
        return SubnetOutput({n: head(h) for n, head in zip(self.task_names, self.out)}, act)


def subnet_forward(pyramid, subnets: nn.ModuleDict, subnet_name: str) -> SubnetOutput:
    if subnet_name not in subnets:
        raise RegistryError(f"unknown subnet {subnet_name!r}")
    return subnets[subnet_name](pyramid)


def importance_report(activations, allocation: ChannelAllocation) -> list:
    """Mean post-ReLU activation of the channels each pyramid level contributed.

    Sums are exactly rounded so the result does not depend on summation order.
    """
    acts = np.asarray(activations, dtype=np.float64)
    if acts.ndim == 1:
        acts = acts[None]
    if acts.shape[1] != allocation.total:
        raise ShapeError(f"activation width {acts.shape[1]} != allocation total {allocation.total}")
    n = acts.shape[0]
    return [math.fsum(acts[:, blk].ravel().tolist()) / (n * (blk.stop - blk.start))
            for blk in allocation.blocks()]
