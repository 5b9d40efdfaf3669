"""Multi-level feature fusion plus channel attention (MLCA)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import AllocationError, ShapeError


@dataclass(frozen=True)
class ChannelAllocation:
    per_level: tuple
    levels: tuple = (0, 1, 2, 3)

    @property
    def total(self) -> int:
        return sum(self.per_level)

    @property
    def provenance(self) -> tuple:
        """Source-level position (index into ``per_level``) of every fused channel."""
        out = []
        for i, n in enumerate(self.per_level):
            out.extend([i] * n)
        return tuple(out)

    def blocks(self):
        start = 0
        for n in self.per_level:
            yield slice(start, start + n)
            start += n


def allocate_channels(input_channels: Sequence[int], total: int,
                      levels: Optional[Sequence[int]] = None) -> ChannelAllocation:
    """Split ``total`` output channels in proportion to ``input_channels``.

    Each level gets floor(total * c_i / sum(c)); leftover channels are handed
    out one per level, deepest level first, cycling if needed.
    """
    counts = [int(c) for c in input_channels]
    if not counts:
        raise AllocationError("no input levels")
    if any(c < 1 for c in counts):
        raise AllocationError(f"input channel counts must be >= 1, got {counts}")
    if total < len(counts):
        raise AllocationError(f"total {total} is smaller than the number of levels {len(counts)}")
    denom = sum(counts)
    per = [total * c // denom for c in counts]
    rem = total - sum(per)
    i = len(per) - 1
    while rem:
        per[i] += 1
        rem -= 1
        i = (i - 1) % len(per)
    # proportional floors can hit 0 for a tiny level; borrow from the widest
    for j, n in enumerate(per):
        if n == 0:
            k = max(range(len(per)), key=lambda t: per[t])
            per[k] -= 1
            per[j] = 1
    levels = tuple(levels) if levels is not None else tuple(range(len(counts)))
    return ChannelAllocation(tuple(per), levels)


def _check_pyramid(levels, scales):
    deepest = levels[-1].shape[1]
    for lvl, s in zip(levels, scales):
        if lvl.ndim != 4 or lvl.shape[1] != deepest * s or lvl.shape[2] != deepest * s:
            raise ShapeError(
                "inconsistent pyramid: expected level sides "
                f"{[deepest * s for s in scales]}, got {[tuple(l.shape) for l in levels]}")


class MLFF(nn.Module):
    """Average-pool every level to the deepest resolution, reduce each with its
    own 3x3 convolution to its allocated width, concatenate in level order."""

    def __init__(self, in_channels: Sequence[int], scales: Sequence[int], width: int,
                 levels: Optional[Sequence[int]] = None):
        super().__init__()
        self.scales = tuple(scales)
        self.allocation = allocate_channels(in_channels, width, levels)
        self.convs = nn.ModuleList(
            nn.Conv2d(c, n, kernel_size=3, padding=1)
            for c, n in zip(in_channels, self.allocation.per_level))

    def forward(self, levels: Sequence[torch.Tensor]) -> torch.Tensor:
        _check_pyramid(levels, self.scales)
        outs = []
        for x, s, conv in zip(levels, self.scales, self.convs):
            x = x.permute(0, 3, 1, 2)
            if s > 1:
                x = F.avg_pool2d(x, kernel_size=s, stride=s)
            outs.append(conv(x))
        return torch.cat(outs, dim=1).permute(0, 2, 3, 1)


class ChannelAttention(nn.Module):
    """CBAM channel branch: shared MLP over spatial avg and max descriptors."""

    def __init__(self, width: int, reduction: int = 16):
        super().__init__()
        self.width = width
        hidden = max(1, width // reduction)
        self.fc1 = nn.Linear(width, hidden)
        self.fc2 = nn.Linear(hidden, width)
        nn.init.zeros_(self.fc1.bias)
        nn.init.zeros_(self.fc2.bias)

    def mlp(self, x):
        return self.fc2(F.relu(self.fc1(x)))

    def forward(self, fused: torch.Tensor):
        if fused.shape[-1] != self.width:
            raise ShapeError(f"channel attention expects width {self.width}, got {fused.shape[-1]}")
        avg = fused.mean(dim=(1, 2))
        mx = fused.amax(dim=(1, 2))
        weights = torch.sigmoid(self.mlp(avg) + self.mlp(mx))
        return weights, fused * weights[:, None, None, :]


class MLCA(nn.Module):
    """MLFF followed by channel attention.

    ``mode``: ``mlff_ca`` (full module), ``mlff_only`` (attention bypassed) or
    ``baseline_top_only`` (one convolution on the deepest tap, no attention).
    The latest attention vector is kept on ``self.last_attention``.
    """

    def __init__(self, pyramid_channels: Sequence[int], pyramid_scales: Sequence[int], width: int,
                 reduction: int = 16, mode: str = "mlff_ca"):
        super().__init__()
        self.mode = mode
        if mode == "baseline_top_only":
            self.mlff = MLFF(pyramid_channels[-1:], (1,), width, levels=(3,))
        else:
            self.mlff = MLFF(pyramid_channels, pyramid_scales, width)
        self.ca = ChannelAttention(width, reduction) if mode == "mlff_ca" else None
        self.last_attention: Optional[torch.Tensor] = None

    @property
    def allocation(self) -> ChannelAllocation:
        return self.mlff.allocation

    def forward(self, pyramid) -> torch.Tensor:
        levels = list(pyramid)
        if self.mode == "baseline_top_only":
            levels = levels[-1:]
        fused = self.mlff(levels)
        if self.ca is None:
            self.last_attention = None
            return fused
        weights, out = self.ca(fused)
        self.last_attention = weights.detach()
        return out


def mlff_forward(pyramid, module: MLFF) -> torch.Tensor:
    return module(list(pyramid))


def ca_forward(fused: torch.Tensor, module: ChannelAttention):
    return module(fused)


def mlca_forward(pyramid, module: MLCA) -> torch.Tensor:
    return module(pyramid)
