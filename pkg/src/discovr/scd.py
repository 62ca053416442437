"""Cross-modal cluster alignment through a shared prototype bank.

Decoded video features at masked positions and the image teacher's
features for the same spatial patches are both scored against learnable
prototypes. Balanced soft assignments (Sinkhorn) from one modality
supervise the other's scores, in both directions, with gradients
flowing only into the video pathway and the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .tokenizer import TubeFrameMap


class AlignmentError(ValueError):
    """Frame features required for a masked tube are missing."""


@dataclass(frozen=True)
class ScdConfig:
    num_prototypes: int = 3000
    proto_temp: float = 0.1
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 10
    normalize_prototypes: bool = True
    sinkhorn_input: str = "scaled"   # feed temperature-scaled scores or raw cosines
    pool: str = "mean"               # how to pool a tube's frame features
    frames: str = "even"             # which frames the image teacher encodes

    def __post_init__(self):
        if self.num_prototypes < 1:
            raise ValueError("need at least one prototype")
        if self.proto_temp <= 0 or self.sinkhorn_eps <= 0:
            raise ValueError("temperatures must be positive")
        if self.sinkhorn_iters < 0:
            raise ValueError("sinkhorn iterations cannot be negative")
        if self.sinkhorn_input not in ("scaled", "raw"):
            raise ValueError(f"sinkhorn_input must be 'scaled' or 'raw', got {self.sinkhorn_input!r}")
        if self.pool not in ("mean", "first_frame"):
            raise ValueError(f"pool must be 'mean' or 'first_frame', got {self.pool!r}")
        if self.frames not in ("even", "both"):
            raise ValueError(f"frames must be 'even' or 'both', got {self.frames!r}")


class PrototypeBank(nn.Module):
    """K learnable unit-norm prototype vectors."""

    def __init__(self, num_prototypes: int, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(num_prototypes, dim))

    @torch.no_grad()
    def renormalize_(self):
        self.weight.copy_(F.normalize(self.weight, dim=-1))

    def forward(self, features: torch.Tensor, temp: float, normalized: bool = True) -> torch.Tensor:
        return prototype_scores(features, self.weight, temp, normalize_bank=normalized)


def prototype_scores(features: torch.Tensor, bank: torch.Tensor, temp: float,
                     normalize_bank: bool = True) -> torch.Tensor:
    """Cosine similarity of features to each prototype, divided by temp.

    features: (..., D); bank: (K, D). Returns (..., K).
    """
    if temp <= 0:
        raise ValueError(f"temperature must be positive, got {temp}")
    f = F.normalize(features, dim=-1)
    b = F.normalize(bank, dim=-1) if normalize_bank else bank
    return (f @ b.transpose(-1, -2)) / temp


@torch.no_grad()
def sinkhorn(scores: torch.Tensor, eps: float = 0.05, iters: int = 10) -> torch.Tensor:
    """Balanced soft assignments from a score matrix.

    Exponentiates scores / eps (shifted by the global max for
    stability), then alternates column and row normalization so columns
    pull toward equal mass R/K and rows toward 1. Rows of the result
    sum to exactly 1. Runs in float64 internally, returns the input
    dtype.
    """
    if scores.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {tuple(scores.shape)}")
    in_dtype = scores.dtype
    s = scores.detach().to(torch.float64)
    R, K = s.shape
    q = torch.exp((s - s.max()) / eps)
    for _ in range(iters):
        q = q / (q.sum(dim=0, keepdim=True) * K)
        q = q / (q.sum(dim=1, keepdim=True) * R)
    q = q * R
    return q.to(in_dtype)


def _stack_slot_features(frame_features: Mapping[int, torch.Tensor], slots: np.ndarray,
                         fmap: TubeFrameMap, pool: str) -> torch.Tensor:
    """Pool per-frame patch features into per-tube-slot features.

    frame_features maps source frame index -> (B, P, D). Returns
    (B, n_slots, P, D) aligned with the given time slots.
    """
    pooled = []
    for slot in slots:
        frames = fmap.frames_for_tube((int(slot), 0, 0))
        if pool == "first_frame":
            frames = frames[:1]
        present = [frame_features[f] for f in frames if f in frame_features]
        if not present:
            raise AlignmentError(
                f"no frame features for tube time slot {int(slot)} (frames {frames})")
        pooled.append(torch.stack(present, dim=0).mean(dim=0))
    return torch.stack(pooled, dim=1)


def align_image_targets(frame_features: Mapping[int, torch.Tensor], masks,
                        fmap: TubeFrameMap, pool: str = "mean") -> torch.Tensor:
    """Image features corresponding to each masked tube, in mask order.

    frame_features: source frame index -> image token features (B, P, D)
    where P is the per-frame patch count. masks: (B, L) boolean, True =
    masked, equal counts per row. Returns (B, n_masked, D): the pooled
    feature of the patch under each masked tube.
    """
    masks = torch.as_tensor(np.asarray(masks), dtype=torch.bool)
    B, L = masks.shape
    gt, gh, gw = fmap.grid
    if L != gt * gh * gw:
        raise AlignmentError(f"mask length {L} does not match grid {fmap.grid}")
    counts = masks.sum(dim=1)
    if not bool((counts == counts[0]).all()):
        raise AlignmentError("rows mask different numbers of tubes")
    n = int(counts[0])
    flat = torch.nonzero(masks, as_tuple=False)[:, 1].view(B, n)
    t_idx = flat // (gh * gw)
    p_idx = flat % (gh * gw)

    needed = np.unique(t_idx.cpu().numpy())
    slot_feats = _stack_slot_features(frame_features, needed, fmap, pool)  # (B, S, P, D)
    lookup = torch.full((gt,), -1, dtype=torch.long)
    lookup[torch.as_tensor(needed)] = torch.arange(len(needed))
    t_local = lookup[t_idx]

    b_idx = torch.arange(B).unsqueeze(1).expand(B, n)
    return slot_feats[b_idx, t_local, p_idx]


def cross_entropy_rows(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean over rows of -sum(target * log softmax(scores))."""
    if scores.shape != targets.shape:
        raise ValueError(f"scores {tuple(scores.shape)} vs targets {tuple(targets.shape)}")
    return -(targets.detach() * F.log_softmax(scores, dim=-1)).sum(dim=-1).mean()


def scd_loss(video_scores: torch.Tensor, image_scores: torch.Tensor,
             video_assign: torch.Tensor, image_assign: torch.Tensor) -> torch.Tensor:
    """Swapped prediction: video scores chase image assignments and vice
    versa. Assignments are treated as constants."""
    return (cross_entropy_rows(video_scores, image_assign)
            + cross_entropy_rows(image_scores, video_assign))
