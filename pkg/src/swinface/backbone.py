"""Hierarchical shifted-window transformer encoder producing four feature taps.

Tensors are channel-last throughout: images are ``(B, H, W, 3)`` and every
pyramid level is ``(B, side, side, C)``.
"""
from __future__ import annotations

from typing import NamedTuple, Optional

import torch
import torch.nn as nn

from .config import BackboneConfig
from .errors import ShapeError


class FeaturePyramid(NamedTuple):
    fm1: torch.Tensor
    fm2: torch.Tensor
    fm3: torch.Tensor
    fm4: torch.Tensor


def normalize_images(images: torch.Tensor) -> torch.Tensor:
    """uint8-range pixels -> per-channel (x/255 - 0.5)/0.5."""
    return (images / 255.0 - 0.5) / 0.5


def drop_path(x: torch.Tensor, p: float, training: bool) -> torch.Tensor:
    if p == 0.0 or not training:
        return x
    keep = 1.0 - p
    mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
    return x * mask / keep


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += ws - 1
    rel[:, :, 1] += ws - 1
    rel[:, :, 0] *= 2 * ws - 1
    return rel.sum(-1)


def shifted_window_mask(side: int, ws: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, side, side, 1)
    cnt = 0
    bounds = (slice(0, -ws), slice(-ws, -shift), slice(-shift, None))
    for h in bounds:
        for w in bounds:
            img[:, h, w, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    mask = win[:, None, :] - win[:, :, None]
    return mask.masked_fill(mask != 0, float(-100.0)).masked_fill(mask == 0, 0.0)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.window_size = window_size
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.register_buffer("relative_position_index", relative_position_index(window_size),
                             persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        B_, N, C = x.shape
        qkv = self.qkv(x).reshape(B_, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(B_ // nw, nw, self.num_heads, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(B_, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(B_, N, C)
        return self.proj(x)


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, side, window_size, shift, mlp_ratio, drop_path_p):
        super().__init__()
        if side <= window_size:
            window_size, shift = side, 0
        self.window_size = window_size
        self.shift = shift
        self.drop_path_p = drop_path_p
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        mask = shifted_window_mask(side, window_size, shift) if shift else None
        self.register_buffer("attn_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        shortcut = x
        x = self.norm1(x)
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        win = self.attn(window_partition(x, self.window_size), self.attn_mask)
        x = window_reverse(win, self.window_size, H, W)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        x = shortcut + drop_path(x, self.drop_path_p, self.training)
        return x + drop_path(self.mlp(self.norm2(x)), self.drop_path_p, self.training)


class PatchMerging(nn.Module):
    """Halves the token grid and doubles the width."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        x = x.reshape(B, H // 2, 2, W // 2, 2, C).permute(0, 1, 3, 4, 2, 5).flatten(3)
        return self.reduction(self.norm(x))


class Stage(nn.Module):
    def __init__(self, dim, depth, num_heads, side, window_size, mlp_ratio, dpr, downsample):
        super().__init__()
        self.downsample = PatchMerging(dim // 2) if downsample else nn.Identity()
        self.blocks = nn.Sequential(*[
            SwinBlock(dim, num_heads, side, window_size, 0 if i % 2 == 0 else window_size // 2,
                      mlp_ratio, dpr[i])
            for i in range(depth)
        ])

    def forward(self, x):
        return self.blocks(self.downsample(x))


class Backbone(nn.Module):
    """Swin-style encoder. FM1/FM2 are the outputs of stages 2/3, FM3 the raw
    output of stage 4 and FM4 the same tokens after the final LayerNorm."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        config.validate()
        self.config = config
        dims, grids = config.stage_dims, config.stage_grids
        p = config.patch_size
        self.patch_embed = nn.Conv2d(config.in_chans, config.embed_dim, kernel_size=p, stride=p)
        self.embed_norm = nn.LayerNorm(config.embed_dim)
        if config.absolute_pos_embed:
            self.pos_embed = nn.Parameter(torch.zeros(1, grids[0], grids[0], config.embed_dim))
        else:
            self.pos_embed = None
        total = sum(config.stage_depths)
        rates = torch.linspace(0, config.drop_path_rate, total).tolist() if total > 1 else [0.0]
        self.stages = nn.ModuleList()
        start = 0
        for i, depth in enumerate(config.stage_depths):
            self.stages.append(Stage(dims[i], depth, config.stage_heads[i], grids[i], config.window_size,
                                     config.mlp_ratio, rates[start:start + depth], downsample=i > 0))
            start += depth
        self.norm = nn.LayerNorm(dims[-1])
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
            elif isinstance(m, WindowAttention):
                nn.init.zeros_(m.relative_position_bias_table)
        if self.pos_embed is not None:
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        c = self.config
        expected = (c.image_size, c.image_size, c.in_chans)
        if images.ndim != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")
        x = self.patch_embed(images.permute(0, 3, 1, 2)).permute(0, 2, 3, 1)
        x = self.embed_norm(x)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return FeaturePyramid(taps[1], taps[2], taps[3], self.norm(taps[3]))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def build_backbone(config: BackboneConfig, seed: int = 0) -> Backbone:
    """Deterministic construction: the same (config, seed) yields identical weights."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Backbone(config)
