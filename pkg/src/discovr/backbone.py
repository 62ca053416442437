"""Transformer encoders, projection heads and the masked-token decoder.

The same TokenEncoder class serves both branches: it projects raw tube
or patch tokens to the model width, adds learned positions, prepends a
class token and runs pre-norm transformer blocks. Students receive only
visible tokens; teachers see everything. The decoder reinserts learned
mask tokens at masked positions and predicts features there.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

VARIANTS = {
    "base": dict(depth=12, width=768, heads=12),
    "small": dict(depth=12, width=384, heads=6),
    "test": dict(depth=2, width=64, heads=4),
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    width: int
    heads: int
    token_dim: int
    seq_len: int
    mlp_ratio: float = 4.0
    variant: str | None = None

    def __post_init__(self):
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if min(self.depth, self.token_dim, self.seq_len) < 1:
            raise ConfigError("depth, token_dim and seq_len must be positive")
        if self.variant is not None:
            expect = VARIANTS.get(self.variant)
            if expect is None:
                raise ConfigError(f"unknown variant {self.variant!r}")
            got = dict(depth=self.depth, width=self.width, heads=self.heads)
            if got != expect:
                raise ConfigError(f"variant {self.variant!r} pins {expect}, got {got}")

    @classmethod
    def for_variant(cls, name: str, token_dim: int, seq_len: int) -> "EncoderConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")
        return cls(token_dim=token_dim, seq_len=seq_len, variant=name, **VARIANTS[name])


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, qkv_bias: bool = True):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        q, k, v = rearrange(self.qkv(x), "b n (three h d) -> three b h n d",
                            three=3, h=self.heads)
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = rearrange(attn @ v, "b h n d -> b n (h d)")
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


def _gather_rows(x: torch.Tensor, keep: torch.Tensor) -> torch.Tensor:
    """Select keep==True entries of (B, L, D) x; every row must keep the same count."""
    B, L, D = x.shape
    counts = keep.sum(dim=1)
    if not bool((counts == counts[0]).all()):
        raise ValueError("rows keep different numbers of tokens")
    n = int(counts[0])
    idx = torch.nonzero(keep, as_tuple=False)[:, 1].view(B, n)
    return torch.gather(x, 1, idx.unsqueeze(-1).expand(-1, -1, D))


# input standardization for [0, 1] pixel tokens. Without it every token
# shares one large positive component, attention averages that component
# into a nearly input-independent class feature, and both probes and
# self-distillation start from a collapsed geometry.
PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


class TokenEncoder(nn.Module):
    """ViT-style encoder over flattened tube or patch tokens.

    forward() takes raw tokens (B, L, token_dim) holding [0, 1] pixel
    values (standardized internally), an optional position index (which
    grid slot each token occupies) and an optional visibility mask; it
    returns per-token features for the fed tokens and the class-token
    feature.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.token_dim, cfg.width)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_table = nn.Parameter(torch.zeros(cfg.seq_len, cfg.width))
        self.blocks = nn.ModuleList(
            Block(cfg.width, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.width)

    def forward(self, tokens, pos_index=None, visible=None):
        B, L, _ = tokens.shape
        if pos_index is None:
            if L != self.cfg.seq_len:
                raise ValueError(f"{L} tokens but pos table has {self.cfg.seq_len} slots")
            pos = self.pos_table
        else:
            pos_index = torch.as_tensor(np.asarray(pos_index), device=tokens.device, dtype=torch.long)
            pos = self.pos_table[pos_index]
        x = self.proj((tokens - PIXEL_MEAN) / PIXEL_STD) + pos
        if visible is not None:
            x = _gather_rows(x, torch.as_tensor(np.asarray(visible), device=tokens.device, dtype=torch.bool))
        cls = self.cls_token.expand(B, -1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        return x[:, 1:], x[:, 0]


@dataclass(frozen=True)
class HeadConfig:
    width: int
    out_dim: int = 4096
    hidden: int = 2048
    bottleneck: int = 256
    kind: str = "mlp"

    def __post_init__(self):
        if self.kind not in ("mlp", "linear"):
            raise ConfigError(f"head kind must be 'mlp' or 'linear', got {self.kind!r}")


class ProjectionHead(nn.Module):
    """Feature-to-logits head for distillation.

    'mlp' is a three-layer perceptron down to a bottleneck that is
    L2-normalized before a bias-free output layer whose rows are
    renormalized to unit length on every forward. 'linear' is a single
    bias-free map, for ablating the head.
    """

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.kind == "linear":
            self.out = nn.Linear(cfg.width, cfg.out_dim, bias=False)
        else:
            self.net = nn.Sequential(
                nn.Linear(cfg.width, cfg.hidden), nn.GELU(),
                nn.Linear(cfg.hidden, cfg.hidden), nn.GELU(),
                nn.Linear(cfg.hidden, cfg.bottleneck))
            self.out_weight = nn.Parameter(torch.zeros(cfg.out_dim, cfg.bottleneck))

    def effective_out_weight(self) -> torch.Tensor:
        if self.cfg.kind == "linear":
            return self.out.weight
        return F.normalize(self.out_weight, dim=-1)

    def forward(self, x):
        if self.cfg.kind == "linear":
            return self.out(x)
        x = self.net(x)
        x = F.normalize(x, dim=-1)
        return F.linear(x, F.normalize(self.out_weight, dim=-1))


class MaskedDecoder(nn.Module):
    """Shallow transformer that predicts features at masked positions.

    Visible-token features from the student encoder are scattered back
    into the full grid, masked slots are filled with a learned token,
    decoder positions are added, and features at the masked slots come
    out. The class feature rides along without a position row.
    """

    def __init__(self, width: int, seq_len: int, depth: int = 2, heads: int | None = None,
                 mlp_ratio: float = 4.0):
        super().__init__()
        heads = heads or max(1, width // 64)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, width))
        self.pos_table = nn.Parameter(torch.zeros(seq_len, width))
        self.blocks = nn.ModuleList(Block(width, heads, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(width)
        self.out = nn.Linear(width, width)

    def forward(self, visible_feats, visible, cls_feat=None):
        visible = torch.as_tensor(np.asarray(visible), device=visible_feats.device, dtype=torch.bool)
        B = visible.shape[0]
        L = self.pos_table.shape[0]
        if visible.shape[1] != L:
            raise ValueError(f"mask covers {visible.shape[1]} slots, decoder built for {L}")
        D = visible_feats.shape[-1]
        x = self.mask_token.expand(B, L, D).clone()
        x[visible] = visible_feats.reshape(-1, D)
        x = x + self.pos_table
        if cls_feat is not None:
            x = torch.cat([cls_feat[:, None, :], x], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        x = self.out(x)
        if cls_feat is not None:
            x = x[:, 1:]
        return _gather_rows(x, ~visible)


class Branch(nn.Module):
    """Student/teacher pair for one modality. The teacher starts as an
    exact copy of the student and is only ever moved by EMA updates."""

    def __init__(self, encoder: TokenEncoder, head: ProjectionHead):
        super().__init__()
        self.student = encoder
        self.student_head = head
        self.teacher = copy.deepcopy(encoder)
        self.teacher_head = copy.deepcopy(head)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        for p in self.teacher_head.parameters():
            p.requires_grad_(False)

    def refresh_teacher(self):
        """Copy student weights into the teacher (used at init and in tests)."""
        with torch.no_grad():
            for t, s in zip(self.teacher.parameters(), self.student.parameters()):
                t.copy_(s)
            for t, s in zip(self.teacher_head.parameters(), self.student_head.parameters()):
                t.copy_(s)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0):
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def init_params(module: nn.Module, rng: np.random.Generator) -> None:
    """Deterministic init from a numpy generator: truncated normal (std
    0.02) for weight matrices and learned tokens, ones for norm scales,
    zeros for biases."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                p.copy_(torch.from_numpy(_trunc_normal(rng, tuple(p.shape))).to(p.dtype))
            elif name.endswith(".bias") or "bias" in name.split(".")[-1]:
                p.zero_()
            else:
                p.fill_(1.0)


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
