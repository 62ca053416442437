"""Teacher-student self-distillation.

Each branch trains by pushing the distributions of masked student views
toward the distribution of an EMA teacher that sees the full input.
Teacher logits are centered (running mean, on by default) and sharpened
with a low temperature; students use a fixed higher temperature.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


class DistillError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    ema_momentum: float = 0.996
    student_temp: float = 0.1
    teacher_temp_start: float = 0.04
    teacher_temp_end: float = 0.07
    teacher_temp_warmup_epochs: int = 30
    video_views: int = 4
    image_views: int = 4
    center_momentum: float = 0.9
    centering: bool = True

    def __post_init__(self):
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise DistillError(f"ema momentum {self.ema_momentum} outside [0, 1]")
        if min(self.student_temp, self.teacher_temp_start, self.teacher_temp_end) <= 0:
            raise DistillError("temperatures must be positive")
        if min(self.video_views, self.image_views) < 1:
            raise DistillError("need at least one student view per branch")
        if self.teacher_temp_warmup_epochs < 0:
            raise DistillError("temperature warmup cannot be negative")


def teacher_temp(epoch: int, cfg: DistillConfig) -> float:
    """Linear ramp from the start to the end temperature over the warmup epochs."""
    warm = cfg.teacher_temp_warmup_epochs
    if warm == 0 or epoch >= warm:
        return cfg.teacher_temp_end
    frac = epoch / warm
    return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start)


@torch.no_grad()
def ema_update(teacher: torch.nn.Module, student: torch.nn.Module, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, in place."""
    t_named = dict(teacher.named_parameters())
    s_named = dict(student.named_parameters())
    if t_named.keys() != s_named.keys():
        raise DistillError("teacher/student parameter names differ")
    for name, t in t_named.items():
        s = s_named[name]
        if t.shape != s.shape:
            raise DistillError(f"shape mismatch at {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)


def sharpen(logits: torch.Tensor, temp: float, center: torch.Tensor | None = None) -> torch.Tensor:
    """Softmax of (logits - center) / temp along the last dim."""
    if temp <= 0:
        raise DistillError(f"temperature must be positive, got {temp}")
    if center is not None:
        logits = logits - center
    return F.softmax(logits / temp, dim=-1)


def soft_cross_entropy(target_probs: torch.Tensor, student_logits: torch.Tensor,
                       student_temp: float) -> torch.Tensor:
    """Mean over rows of -sum(target * log softmax(student / temp))."""
    if target_probs.shape != student_logits.shape:
        raise DistillError(f"target {tuple(target_probs.shape)} vs student {tuple(student_logits.shape)}")
    logp = F.log_softmax(student_logits / student_temp, dim=-1)
    return -(target_probs.detach() * logp).sum(dim=-1).mean()


@torch.no_grad()
def update_center(center: torch.Tensor, teacher_logits: torch.Tensor, momentum: float) -> torch.Tensor:
    """Running mean of teacher logits: m * center + (1 - m) * batch mean."""
    batch_mean = teacher_logits.mean(dim=0)
    return center * momentum + batch_mean * (1.0 - momentum)


def multiview_distill_loss(teacher_logits: torch.Tensor,
                           student_view_logits: list[torch.Tensor],
                           temp_t: float, temp_s: float,
                           center: torch.Tensor | None) -> torch.Tensor:
    """Average soft cross-entropy from the (sharpened, centered) teacher
    distribution to each masked student view."""
    if not student_view_logits:
        raise DistillError("no student views")
    target = sharpen(teacher_logits.detach(), temp_t, center)
    losses = [soft_cross_entropy(target, s, temp_s) for s in student_view_logits]
    return torch.stack(losses).mean()


def _branch_loss(branch, teacher_tokens, view_tokens, pos_index, view_masks,
                 temp_t, temp_s, center):
    with torch.no_grad():
        _, cls_t = branch.teacher(teacher_tokens, pos_index=pos_index)
        teacher_logits = branch.teacher_head(cls_t)
    view_logits = []
    for tokens, mask in zip(view_tokens, view_masks):
        _, cls_s = branch.student(tokens, pos_index=pos_index, visible=~mask)
        view_logits.append(branch.student_head(cls_s))
    loss = multiview_distill_loss(teacher_logits, view_logits, temp_t, temp_s, center)
    return loss, teacher_logits


def video_ssl_loss(branch, teacher_tokens, view_tokens, view_masks, temp_t,
                   cfg: DistillConfig, center=None, pos_index=None):
    """Masked self-distillation over a batch of clips.

    teacher_tokens: (B, L, token_dim) for the unmasked teacher pass;
    view_tokens: per-view token tensors of the same shape (the same clip
    under each view's photometric jitter); view_masks: list of (B, L)
    boolean arrays, True = masked. Returns (loss, teacher_logits) so the
    caller can update the center.
    """
    if len(view_tokens) != len(view_masks):
        raise DistillError(
            f"{len(view_tokens)} view token sets for {len(view_masks)} masks")
    return _branch_loss(branch, teacher_tokens, view_tokens, pos_index, view_masks,
                        temp_t, cfg.student_temp, center)


def image_ssl_loss(branch, teacher_tokens, view_tokens, view_masks, temp_t,
                   cfg: DistillConfig, center=None, pos_index=None):
    """Same distillation on single-frame patch tokens."""
    if len(view_tokens) != len(view_masks):
        raise DistillError(
            f"{len(view_tokens)} view token sets for {len(view_masks)} masks")
    return _branch_loss(branch, teacher_tokens, view_tokens, pos_index, view_masks,
                        temp_t, cfg.student_temp, center)
