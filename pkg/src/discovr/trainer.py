"""Pretraining loop for the dual-branch model.

One optimization step: sample clips, draw masked views, compute the
video distillation loss, the image distillation loss and the
cross-modal cluster loss, backprop through students, decoder and
prototypes, then move teachers by EMA and update the centering
statistics. All stochastic choices come from one numpy generator held
in the training state, so a run is a pure function of config and seed.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import tensorio
from .backbone import (Branch, ConfigError, EncoderConfig, HeadConfig, MaskedDecoder,
                       ProjectionHead, TokenEncoder, init_params)
from .data import FrameStore, load_manifest, pretraining_records, sample_clip
from .distill import (DistillConfig, ema_update, image_ssl_loss, teacher_temp,
                      update_center, video_ssl_loss)
from .scd import PrototypeBank, ScdConfig, align_image_targets, prototype_scores, scd_loss, sinkhorn
from .tokenizer import TUBE, build_tube_frame_map, make_mask, mask_count, patchify_frame, tubify

METRIC_KEYS = ("step", "epoch", "lr", "loss_total", "loss_vid", "loss_img", "loss_scd", "tau_t")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    # model geometry
    variant: str = "base"
    frames_per_clip: int = 64
    clip_stride: int = 3
    image_size: int = 112
    channels: int = 3
    head_out_dim: int = 4096
    head_hidden: int = 2048
    head_bottleneck: int = 256
    head_kind: str = "mlp"
    decoder_depth: int = 2
    # optimization
    epochs: int = 400
    warmup_epochs: int = 40
    base_lr: float = 1.5e-4
    weight_decay: float = 0.05
    batch_size: int = 8
    clip_grad: float = 3.0
    seed: int = 0
    # masking
    mask_ratio: float = 0.9
    image_mask_ratio: float = 0.9
    image_frames_per_clip: int = 2
    # per-view photometric jitter (multiplicative gain, additive shift)
    aug_gain: float = 0.15
    aug_shift: float = 0.05
    # loss mixing
    w_vid: float = 1.0
    w_img: float = 1.0
    w_scd: float = 1.0
    enable_vid: bool = True
    enable_img: bool = True
    enable_scd: bool = True
    # bookkeeping
    log_every: int = 1
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    distill: DistillConfig = field(default_factory=DistillConfig)
    scd: ScdConfig = field(default_factory=ScdConfig)

    def __post_init__(self):
        if self.frames_per_clip < TUBE[0] or self.frames_per_clip % TUBE[0]:
            raise ConfigError(f"frames_per_clip {self.frames_per_clip} not a multiple of {TUBE[0]}")
        if self.image_size % 16:
            raise ConfigError("image_size must be a multiple of 16")
        if not (0 <= self.mask_ratio < 1 and 0 <= self.image_mask_ratio < 1):
            raise ConfigError("mask ratios must be in [0, 1)")
        if min(self.w_vid, self.w_img, self.w_scd) < 0:
            raise ConfigError("loss weights cannot be negative")
        active = [(self.enable_vid, self.w_vid), (self.enable_img, self.w_img),
                  (self.enable_scd, self.w_scd)]
        if not any(on and w > 0 for on, w in active):
            raise ConfigError("no loss is active: enable at least one term with positive weight")
        if min(self.epochs, self.batch_size, self.image_frames_per_clip) < 1:
            raise ConfigError("epochs, batch_size and image_frames_per_clip must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError("warmup_epochs must lie within [0, epochs]")
        if self.image_frames_per_clip > self.frames_per_clip:
            raise ConfigError("image_frames_per_clip exceeds frames_per_clip")
        if self.clip_stride < 1:
            raise ConfigError("clip_stride must be >= 1")
        if not (0 <= self.aug_gain < 1 and 0 <= self.aug_shift < 1):
            raise ConfigError("aug_gain and aug_shift must be in [0, 1)")
        for name, ratio, length in (("mask_ratio", self.mask_ratio, self.video_seq_len),
                                    ("image_mask_ratio", self.image_mask_ratio, self.image_seq_len)):
            n = mask_count(length, ratio)
            if n >= length:
                raise ConfigError(
                    f"{name}={ratio} leaves no visible token at sequence length {length}")
            if ratio > 0 and n == 0:
                raise ConfigError(
                    f"{name}={ratio} rounds to zero masked tokens at sequence length {length}")

    # flat-key round trip -----------------------------------------------
    _ALIASES = {"scd_pool": "pool", "scd_frames": "frames"}

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        own = {f.name for f in dataclasses.fields(cls) if f.name not in ("distill", "scd")}
        dist_fields = {f.name for f in dataclasses.fields(DistillConfig)}
        scd_fields = {f.name for f in dataclasses.fields(ScdConfig)}
        kw, dist_kw, scd_kw = {}, {}, {}
        for key, val in mapping.items():
            if key in cls._ALIASES:
                scd_kw[cls._ALIASES[key]] = val
            elif key in own:
                kw[key] = val
            elif key in dist_fields:
                dist_kw[key] = val
            elif key in scd_fields and key not in ("pool", "frames"):
                scd_kw[key] = val
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return cls(distill=DistillConfig(**dist_kw), scd=ScdConfig(**scd_kw), **kw)

    def to_mapping(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name in ("distill", "scd"):
                continue
            out[f.name] = getattr(self, f.name)
        for f in dataclasses.fields(DistillConfig):
            out[f.name] = getattr(self.distill, f.name)
        for f in dataclasses.fields(ScdConfig):
            val = getattr(self.scd, f.name)
            alias = {v: k for k, v in self._ALIASES.items()}
            out[alias.get(f.name, f.name)] = val
        return out

    # geometry helpers ----------------------------------------------------
    @property
    def video_grid(self) -> tuple[int, int, int]:
        return (self.frames_per_clip // TUBE[0], self.image_size // 16, self.image_size // 16)

    @property
    def video_seq_len(self) -> int:
        gt, gh, gw = self.video_grid
        return gt * gh * gw

    @property
    def image_seq_len(self) -> int:
        return (self.image_size // 16) ** 2

    @property
    def video_token_dim(self) -> int:
        return TUBE[0] * TUBE[1] * TUBE[2] * self.channels

    @property
    def image_token_dim(self) -> int:
        return 16 * 16 * self.channels


class PretrainModel(nn.Module):
    """Both branches plus decoder and prototype bank."""

    def __init__(self, cfg: TrainConfig):
        super().__init__()
        self.cfg = cfg
        venc = EncoderConfig.for_variant(cfg.variant, cfg.video_token_dim, cfg.video_seq_len)
        ienc = EncoderConfig.for_variant(cfg.variant, cfg.image_token_dim, cfg.image_seq_len)
        hcfg = HeadConfig(width=venc.width, out_dim=cfg.head_out_dim, hidden=cfg.head_hidden,
                          bottleneck=cfg.head_bottleneck, kind=cfg.head_kind)
        self.video = Branch(TokenEncoder(venc), ProjectionHead(hcfg))
        self.image = Branch(TokenEncoder(ienc), ProjectionHead(hcfg))
        self.decoder = MaskedDecoder(venc.width, cfg.video_seq_len,
                                     depth=cfg.decoder_depth, heads=venc.heads)
        self.prototypes = PrototypeBank(cfg.scd.num_prototypes, venc.width)
        self.fmap = build_tube_frame_map(cfg.frames_per_clip, cfg.image_size, cfg.image_size)

    def groups(self) -> dict[str, nn.Module]:
        heads = nn.ModuleDict({
            "video_student": self.video.student_head,
            "video_teacher": self.video.teacher_head,
            "image_student": self.image.student_head,
            "image_teacher": self.image.teacher_head,
        })
        return {
            "video_student": self.video.student,
            "video_teacher": self.video.teacher,
            "image_student": self.image.student,
            "image_teacher": self.image.teacher,
            "video_decoder": self.decoder,
            "heads": heads,
            "prototypes": self.prototypes,
        }

    def trainable_modules(self) -> list[nn.Module]:
        return [self.video.student, self.video.student_head,
                self.image.student, self.image.student_head,
                self.decoder, self.prototypes]

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for m in self.trainable_modules() for p in m.parameters()]


def init_weights(model: PretrainModel, rng: np.random.Generator) -> None:
    for mod in model.trainable_modules():
        init_params(mod, rng)
    model.prototypes.renormalize_()
    model.video.refresh_teacher()
    model.image.refresh_teacher()


@dataclass
class TrainState:
    model: PretrainModel
    optimizer: torch.optim.AdamW
    centers: dict[str, torch.Tensor]
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0


def build_optimizer(model: PretrainModel, cfg: TrainConfig) -> torch.optim.AdamW:
    """AdamW with weight decay on matrices only; biases and norm gains are
    left undecayed."""
    decay, no_decay = [], []
    for p in model.trainable_parameters():
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=0.0)


def init_state(cfg: TrainConfig, dtype: torch.dtype = torch.float32) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    model = PretrainModel(cfg).to(dtype)
    init_weights(model, rng)
    optimizer = build_optimizer(model, cfg)
    centers = {
        "video": torch.zeros(cfg.head_out_dim, dtype=dtype),
        "image": torch.zeros(cfg.head_out_dim, dtype=dtype),
    }
    return TrainState(model=model, optimizer=optimizer, centers=centers, rng=rng)


def lr_schedule(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to exactly base_lr at step == warmup_steps, then
    cosine decay to zero at total_steps."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class StepPlan:
    """All random choices of one step, drawn up front so the loss itself
    is a deterministic function of parameters (used by the gradient
    checks to pin everything except the weights).

    Per-view augmentation rows are indexed 0 for the teacher's view and
    1.. for the student views. Jitters hold (gain, shift) pairs; crops
    hold (top, left) pixel offsets into the stored frames.
    """

    video_masks: list[np.ndarray]
    image_frame_ids: np.ndarray
    image_masks: list[np.ndarray]
    video_jitter: np.ndarray  # (M + 1, B, 2) float
    image_jitter: np.ndarray  # (N + 1, B * F, 2) float
    video_crops: np.ndarray  # (M + 1, B, 2) int
    image_crops: np.ndarray  # (N + 1, B * F, 2) int


def _draw_jitter(rng: np.random.Generator, views: int, rows: int,
                 gain: float, shift: float) -> np.ndarray:
    out = np.empty((views, rows, 2))
    out[..., 0] = 1.0 + rng.uniform(-gain, gain, size=(views, rows))
    out[..., 1] = rng.uniform(-shift, shift, size=(views, rows))
    return out


def draw_plan(cfg: TrainConfig, batch_size: int, rng: np.random.Generator,
              frame_hw: tuple[int, int] | None = None) -> StepPlan:
    """frame_hw: stored frame size; offsets are drawn so an image_size
    window always fits. None means the frames already match image_size."""
    lv, li = cfg.video_seq_len, cfg.image_seq_len
    video_masks = [
        np.stack([make_mask(lv, cfg.mask_ratio, rng).masked for _ in range(batch_size)])
        for _ in range(cfg.distill.video_views)]
    frame_ids = np.stack([
        rng.choice(cfg.frames_per_clip, size=cfg.image_frames_per_clip, replace=False)
        for _ in range(batch_size)])
    rows = batch_size * cfg.image_frames_per_clip
    image_masks = [
        np.stack([make_mask(li, cfg.image_mask_ratio, rng).masked for _ in range(rows)])
        for _ in range(cfg.distill.image_views)]
    video_jitter = _draw_jitter(rng, cfg.distill.video_views + 1, batch_size,
                                cfg.aug_gain, cfg.aug_shift)
    image_jitter = _draw_jitter(rng, cfg.distill.image_views + 1, rows,
                                cfg.aug_gain, cfg.aug_shift)
    if frame_hw is None:
        frame_hw = (cfg.image_size, cfg.image_size)
    max_top = frame_hw[0] - cfg.image_size
    max_left = frame_hw[1] - cfg.image_size
    if max_top < 0 or max_left < 0:
        raise ConfigError(f"stored frames {frame_hw} smaller than crop {cfg.image_size}")
    video_crops = np.stack([rng.integers(0, max_top + 1, size=(cfg.distill.video_views + 1, batch_size)),
                            rng.integers(0, max_left + 1, size=(cfg.distill.video_views + 1, batch_size))],
                           axis=-1)
    image_crops = np.stack([rng.integers(0, max_top + 1, size=(cfg.distill.image_views + 1, rows)),
                            rng.integers(0, max_left + 1, size=(cfg.distill.image_views + 1, rows))],
                           axis=-1)
    return StepPlan(video_masks=video_masks, image_frame_ids=frame_ids,
                    image_masks=image_masks, video_jitter=video_jitter,
                    image_jitter=image_jitter, video_crops=video_crops,
                    image_crops=image_crops)


def _crop_rows(frames: np.ndarray, offsets: np.ndarray, size: int) -> np.ndarray:
    """Per-element window crop. frames: (B, ..., H, W, C); offsets: (B, 2)."""
    out = [frames[i][..., top:top + size, left:left + size, :]
           for i, (top, left) in enumerate(np.asarray(offsets))]
    return np.stack(out)


def _jitter_tokens(tokens: torch.Tensor, jitter_row: np.ndarray) -> torch.Tensor:
    """Apply a per-clip affine intensity jitter to token vectors. Tokens are
    linear rearrangements of pixels, so gain * pixels + shift acts the same
    way on the token values."""
    g = torch.as_tensor(jitter_row[:, 0], dtype=tokens.dtype, device=tokens.device)
    b = torch.as_tensor(jitter_row[:, 1], dtype=tokens.dtype, device=tokens.device)
    return tokens * g[:, None, None] + b[:, None, None]


def _to_model(tensor_like, model: PretrainModel) -> torch.Tensor:
    p = next(model.parameters())
    return torch.as_tensor(np.asarray(tensor_like)).to(dtype=p.dtype, device=p.device)


def total_loss(model: PretrainModel, frames: np.ndarray, cfg: TrainConfig, plan: StepPlan,
               centers: dict[str, torch.Tensor], epoch: int,
               pinned_assignments: tuple[torch.Tensor, torch.Tensor] | None = None):
    """Weighted sum of the enabled loss terms for one batch.

    frames: (B, T, H, W, C) float array in [0, 1]. Returns (total,
    parts, info) where parts maps metric names to weighted float
    contributions and info carries teacher logits and the cluster
    assignments actually used.
    """
    B = frames.shape[0]
    temp_t = teacher_temp(epoch, cfg.distill)
    dev_dtype = next(model.parameters()).dtype
    zero = torch.zeros((), dtype=dev_dtype)
    parts = {"loss_vid": 0.0, "loss_img": 0.0, "loss_scd": 0.0}
    info: dict = {"tau_t": temp_t}
    total = zero
    size = cfg.image_size

    def video_view(row: int) -> torch.Tensor:
        cropped = _crop_rows(frames, plan.video_crops[row], size)
        return _jitter_tokens(_to_model(tubify(cropped).tokens, model),
                              plan.video_jitter[row])

    vid_views: list[torch.Tensor] = []
    if cfg.enable_vid:
        center = centers["video"] if cfg.distill.centering else None
        teacher_tokens = video_view(0)
        vid_views = [video_view(1 + m) for m in range(cfg.distill.video_views)]
        loss_vid, tl = video_ssl_loss(model.video, teacher_tokens, vid_views,
                                      plan.video_masks, temp_t, cfg.distill, center)
        total = total + cfg.w_vid * loss_vid
        parts["loss_vid"] = float(cfg.w_vid * loss_vid.detach())
        info["teacher_logits_video"] = tl.detach()

    if cfg.enable_img:
        sel = frames[np.arange(B)[:, None], plan.image_frame_ids]  # (B, F, H, W, C)
        flat = sel.reshape(-1, *frames.shape[2:])

        def image_view(row: int) -> torch.Tensor:
            cropped = _crop_rows(flat, plan.image_crops[row], size)
            return _jitter_tokens(_to_model(patchify_frame(cropped).tokens, model),
                                  plan.image_jitter[row])

        center = centers["image"] if cfg.distill.centering else None
        teacher_tokens = image_view(0)
        view_tokens = [image_view(1 + n) for n in range(cfg.distill.image_views)]
        loss_img, tl = image_ssl_loss(model.image, teacher_tokens, view_tokens,
                                      plan.image_masks, temp_t, cfg.distill, center)
        total = total + cfg.w_img * loss_img
        parts["loss_img"] = float(cfg.w_img * loss_img.detach())
        info["teacher_logits_image"] = tl.detach()

    if cfg.enable_scd:
        view0 = plan.video_masks[0]
        view0_tokens = vid_views[0] if vid_views else video_view(1)
        feats, cls = model.video.student(view0_tokens, visible=~view0)
        dec = model.decoder(feats, visible=~view0, cls_feat=cls)  # (B, Nmask, D)

        gt = cfg.video_grid[0]
        if cfg.scd.frames == "even":
            frame_ids = [2 * g for g in range(gt)]
        else:
            frame_ids = list(range(cfg.frames_per_clip))
        # the image teacher must look at the same spatial window the video
        # student saw, or the per-tube targets stop being aligned
        sel = _crop_rows(frames[:, frame_ids], plan.video_crops[1], size)
        flat = sel.reshape(-1, size, size, frames.shape[-1])
        with torch.no_grad():
            tok = _to_model(patchify_frame(flat).tokens, model)
            patch_feats, _ = model.image.teacher(tok)
        per_frame = patch_feats.view(B, len(frame_ids), *patch_feats.shape[1:])
        frame_features = {fid: per_frame[:, i] for i, fid in enumerate(frame_ids)}
        targets = align_image_targets(frame_features, view0, model.fmap, pool=cfg.scd.pool)

        z_v = dec.reshape(-1, dec.shape[-1])
        z_i = targets.reshape(-1, targets.shape[-1]).detach()
        raw_v = prototype_scores(z_v, model.prototypes.weight, 1.0,
                                 normalize_bank=cfg.scd.normalize_prototypes)
        raw_i = prototype_scores(z_i, model.prototypes.weight, 1.0,
                                 normalize_bank=cfg.scd.normalize_prototypes)
        s_v = raw_v / cfg.scd.proto_temp
        s_i = raw_i / cfg.scd.proto_temp
        if pinned_assignments is not None:
            q_v, q_i = pinned_assignments
        else:
            sink_v = s_v if cfg.scd.sinkhorn_input == "scaled" else raw_v
            sink_i = s_i if cfg.scd.sinkhorn_input == "scaled" else raw_i
            q_v = sinkhorn(sink_v, cfg.scd.sinkhorn_eps, cfg.scd.sinkhorn_iters)
            q_i = sinkhorn(sink_i, cfg.scd.sinkhorn_eps, cfg.scd.sinkhorn_iters)
        loss_scd = scd_loss(s_v, s_i, q_v, q_i)
        total = total + cfg.w_scd * loss_scd
        parts["loss_scd"] = float(cfg.w_scd * loss_scd.detach())
        info["assignments"] = (q_v.detach(), q_i.detach())

    return total, parts, info


def train_step(state: TrainState, frames: np.ndarray, cfg: TrainConfig,
               steps_per_epoch: int, total_steps: int) -> dict:
    lr = lr_schedule(state.step, total_steps, cfg.warmup_epochs * steps_per_epoch, cfg.base_lr)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    epoch = state.step // steps_per_epoch
    plan = draw_plan(cfg, frames.shape[0], state.rng, frame_hw=frames.shape[2:4])
    total, parts, info = total_loss(state.model, frames, cfg, plan, state.centers, epoch)

    if not torch.isfinite(total):
        raise DivergenceError(
            f"non-finite loss at step {state.step}: total={float(total)} parts={parts}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    if cfg.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(state.model.trainable_parameters(), cfg.clip_grad)
    state.optimizer.step()
    if cfg.enable_scd and cfg.scd.normalize_prototypes:
        state.model.prototypes.renormalize_()

    m = cfg.distill.ema_momentum
    ema_update(state.model.video.teacher, state.model.video.student, m)
    ema_update(state.model.video.teacher_head, state.model.video.student_head, m)
    ema_update(state.model.image.teacher, state.model.image.student, m)
    ema_update(state.model.image.teacher_head, state.model.image.student_head, m)

    if cfg.distill.centering:
        cm = cfg.distill.center_momentum
        if "teacher_logits_video" in info:
            state.centers["video"] = update_center(state.centers["video"],
                                                   info["teacher_logits_video"], cm)
        if "teacher_logits_image" in info:
            state.centers["image"] = update_center(state.centers["image"],
                                                   info["teacher_logits_image"], cm)

    state.step += 1
    state.epoch = state.step // steps_per_epoch
    return {
        "step": state.step, "epoch": epoch, "lr": lr,
        "loss_total": float(total.detach()),
        "loss_vid": parts["loss_vid"], "loss_img": parts["loss_img"],
        "loss_scd": parts["loss_scd"], "tau_t": info["tau_t"],
    }


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for gname, mod in state.model.groups().items():
        for pname, tensor in mod.state_dict().items():
            arrays[f"{gname}/{pname}"] = tensor.detach().cpu().numpy()
    sd = state.optimizer.state_dict()
    for idx, entry in sd["state"].items():
        for key, val in entry.items():
            arrays[f"optim/{idx}/{key}"] = (val.detach().cpu().numpy()
                                            if torch.is_tensor(val) else np.asarray(val))
    arrays["center/video"] = state.centers["video"].cpu().numpy()
    arrays["center/image"] = state.centers["image"].cpu().numpy()
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "config": _jsonable(cfg.to_mapping()),
        "optim_param_groups": sd["param_groups"],
        "torch_dtype": str(next(state.model.parameters()).dtype),
    }
    tensorio.save_arrays(path, arrays, meta)


def _jsonable(mapping: dict) -> dict:
    out = {}
    for k, v in mapping.items():
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    arrays, meta = tensorio.load_arrays(path)
    cfg = TrainConfig.from_mapping(meta["config"])
    dtype = getattr(torch, meta["torch_dtype"].split(".")[-1])
    model = PretrainModel(cfg).to(dtype)
    for gname, mod in model.groups().items():
        prefix = f"{gname}/"
        sd = {k[len(prefix):]: torch.from_numpy(arrays[k])
              for k in arrays if k.startswith(prefix) and not k.startswith("optim/")}
        mod.load_state_dict(sd, strict=True)

    optimizer = build_optimizer(model, cfg)
    opt_state: dict[int, dict] = {}
    for key in arrays:
        if not key.startswith("optim/"):
            continue
        _, idx, name = key.split("/", 2)
        opt_state.setdefault(int(idx), {})[name] = torch.from_numpy(arrays[key])
    groups = []
    for g in meta["optim_param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    if opt_state:
        optimizer.load_state_dict({"state": opt_state, "param_groups": groups})

    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    centers = {"video": torch.from_numpy(arrays["center/video"]),
               "image": torch.from_numpy(arrays["center/image"])}
    state = TrainState(model=model, optimizer=optimizer, centers=centers, rng=rng,
                       step=meta["step"], epoch=meta["epoch"])
    return state, cfg


# ---------------------------------------------------------------------------
# full loop

def maybe_enable_determinism() -> bool:
    """Honor DISCOVR_DETERMINISTIC=1: single thread, deterministic kernels."""
    if os.environ.get("DISCOVR_DETERMINISTIC") == "1":
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        return True
    return False


def sample_batch(records, store: FrameStore, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    picks = rng.integers(0, len(records), size=cfg.batch_size)
    clips = []
    for i in picks:
        rec = records[int(i)]
        clip = sample_clip(store.frames(rec), cfg.frames_per_clip, cfg.clip_stride, rng,
                           source_id=rec.video_path)
        clips.append(clip.frames)
    return np.stack(clips)


def train(cfg: TrainConfig, data_dir, out_dir, resume=None, log=print) -> dict:
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    records = pretraining_records(load_manifest(data_dir / "manifest.csv"))
    if not records:
        raise ValueError("no normal training videos in manifest; nothing to pretrain on")
    store = FrameStore(data_dir)

    if resume is not None:
        state, cfg = load_checkpoint(resume)
    else:
        state = init_state(cfg)
    steps_per_epoch = max(1, len(records) // cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    mode = "a" if resume is not None else "w"
    last = {}
    with open(metrics_path, mode) as mfh:
        while state.step < total_steps:
            frames = sample_batch(records, store, cfg, state.rng)
            last = train_step(state, frames, cfg, steps_per_epoch, total_steps)
            mfh.write(json.dumps({k: last[k] for k in METRIC_KEYS}) + "\n")
            if last["step"] % max(1, cfg.log_every * steps_per_epoch) == 0 and log is not None:
                log(f"epoch {last['epoch']:4d} step {last['step']:6d} "
                    f"loss {last['loss_total']:.4f} lr {last['lr']:.2e}")
            boundary = state.step % steps_per_epoch == 0
            if boundary and cfg.checkpoint_every and (state.epoch % cfg.checkpoint_every == 0):
                save_checkpoint(state, cfg, out_dir / f"checkpoint_ep{state.epoch:04d}.dsct")

    final = out_dir / "checkpoint.dsct"
    save_checkpoint(state, cfg, final)
    return {"checkpoint": str(final), "steps": state.step, "final": last}
