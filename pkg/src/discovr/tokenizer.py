"""Clip and frame tokenization.

Videos become sequences of space-time tube tokens (2 frames x 16 x 16
pixels per token by default), single frames become sequences of 16 x 16
patch tokens. Masks are sampled with an exact count so every sample in
a batch keeps the same number of visible tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from einops import rearrange

TUBE = (2, 16, 16)
PATCH_SIZE = 16


class GeometryError(ValueError):
    """Shape is incompatible with the token geometry."""


class MaskError(ValueError):
    """Masking request cannot be satisfied."""


@dataclass(frozen=True)
class VideoClip:
    """A contiguous (possibly strided) run of frames from one video.

    frames: float32 (T, H, W, C) with intensities in [0, 1].
    source_id: identifier of the originating video.
    frame_span: (start_frame, stride) in source-video coordinates.
    """

    frames: np.ndarray
    source_id: str = ""
    frame_span: tuple[int, int] = (0, 1)

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4:
            raise GeometryError(f"clip frames must be (T, H, W, C), got shape {f.shape}")
        t, h, w, _ = f.shape
        if t < TUBE[0] or t % TUBE[0]:
            raise GeometryError(f"frame count {t} not a positive multiple of {TUBE[0]}")
        if h % PATCH_SIZE or w % PATCH_SIZE or h == 0 or w == 0:
            raise GeometryError(f"spatial dims {(h, w)} not multiples of {PATCH_SIZE}")
        if not np.issubdtype(f.dtype, np.floating):
            raise GeometryError(f"clip frames must be float, got {f.dtype}")
        lo, hi = float(f.min(initial=0.0)), float(f.max(initial=0.0))
        if lo < -1e-6 or hi > 1 + 1e-6:
            raise GeometryError(f"intensities outside [0, 1]: range [{lo:.4g}, {hi:.4g}]")

    @property
    def grid(self) -> tuple[int, int, int]:
        t, h, w, _ = self.frames.shape
        return (t // TUBE[0], h // PATCH_SIZE, w // PATCH_SIZE)


@dataclass(frozen=True)
class TokenBatch:
    """Flattened tokens plus the grid coordinates they came from.

    tokens: (B, L, D) array or tensor.
    positions: (L, 3) int array of (t, h, w) grid indices, row-major.
    grid: (GT, GH, GW) token grid dims; GT == 1 for single frames.
    """

    tokens: object
    positions: np.ndarray
    grid: tuple[int, int, int]
    has_class_slot: bool = False

    def __post_init__(self):
        gt, gh, gw = self.grid
        L = self.positions.shape[0]
        if self.tokens.shape[1] != L:
            raise GeometryError(f"{self.tokens.shape[1]} tokens but {L} positions")
        if L != gt * gh * gw:
            raise GeometryError(f"{L} positions for grid {self.grid}")
        if len({tuple(p) for p in np.asarray(self.positions)}) != L:
            raise GeometryError("duplicate token positions")
        pos = np.asarray(self.positions)
        if pos.min(initial=0) < 0 or (pos >= np.array(self.grid)).any():
            raise GeometryError("token position outside grid")

    @property
    def flat_positions(self) -> np.ndarray:
        """Row-major flat index of each token: t * GH * GW + h * GW + w."""
        _, gh, gw = self.grid
        p = self.positions
        return p[:, 0] * (gh * gw) + p[:, 1] * gw + p[:, 2]


@dataclass(frozen=True)
class MaskSpec:
    """A boolean mask over a token sequence with an exact masked count."""

    masked: np.ndarray
    ratio: float
    seed: str = ""

    def __post_init__(self):
        m = self.masked
        if m.dtype != np.bool_ or m.ndim != 1:
            raise MaskError("mask must be a 1-D boolean array")
        L = m.shape[0]
        n = int(m.sum())
        if n >= L:
            raise MaskError("mask leaves no visible token")
        if self.ratio > 0 and n == 0:
            raise MaskError("positive ratio but nothing masked")
        if n != mask_count(L, self.ratio):
            raise MaskError(f"{n} masked, expected {mask_count(L, self.ratio)} for ratio {self.ratio}")

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def n_visible(self) -> int:
        return self.masked.shape[0] - self.n_masked

    @property
    def masked_indices(self) -> np.ndarray:
        return np.flatnonzero(self.masked)

    @property
    def visible_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)


def mask_count(length: int, ratio: float) -> int:
    """Number of masked tokens: ratio * length rounded half-up."""
    return int(math.floor(ratio * length + 0.5))


def make_mask(length: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    """Sample a uniform random mask with exactly mask_count(length, ratio) ones."""
    if not 0 <= ratio < 1:
        raise MaskError(f"mask ratio must be in [0, 1), got {ratio}")
    n = mask_count(length, ratio)
    if n >= length:
        raise MaskError(f"ratio {ratio} masks all {length} tokens")
    if ratio > 0 and n == 0:
        raise MaskError(f"ratio {ratio} rounds to zero masked tokens at length {length}")
    state_tag = f"{hash(repr(rng.bit_generator.state)) & 0xFFFFFFFF:08x}"
    masked = np.zeros(length, dtype=bool)
    if n:
        masked[rng.choice(length, size=n, replace=False)] = True
    return MaskSpec(masked=masked, ratio=ratio, seed=f"rng:{state_tag}")


def _grid_positions(gt: int, gh: int, gw: int) -> np.ndarray:
    tt, hh, ww = np.meshgrid(np.arange(gt), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.int64)


def tubify(clip, tube: tuple[int, int, int] = TUBE) -> TokenBatch:
    """Flatten a clip into space-time tube tokens, row-major over (t, h, w).

    Accepts a VideoClip or a (T, H, W, C) / (B, T, H, W, C) array or tensor;
    each token is the flattened (tube_t * tube_h * tube_w * C) pixel block.
    """
    frames = clip.frames if isinstance(clip, VideoClip) else clip
    if frames.ndim == 4:
        frames = frames[None]
    if frames.ndim != 5:
        raise GeometryError(f"expected (T, H, W, C) or (B, T, H, W, C), got {frames.shape}")
    a, p, q = tube
    _, t, h, w, _ = frames.shape
    if t % a or h % p or w % q or t == 0:
        raise GeometryError(f"frames {(t, h, w)} not divisible by tube {tube}")
    tokens = rearrange(frames, "b (gt a) (gh p) (gw q) c -> b (gt gh gw) (a p q c)", a=a, p=p, q=q)
    grid = (t // a, h // p, w // q)
    return TokenBatch(tokens=tokens, positions=_grid_positions(*grid), grid=grid)


def untubify(batch: TokenBatch, frame_shape: tuple[int, int, int], tube: tuple[int, int, int] = TUBE):
    """Invert tubify; exact round-trip. frame_shape is (H, W, C)."""
    a, p, q = tube
    h, w, c = frame_shape
    gt, gh, gw = batch.grid
    if (gh * p, gw * q) != (h, w):
        raise GeometryError(f"grid {batch.grid} does not match frame shape {frame_shape}")
    flat = batch.flat_positions
    if not np.array_equal(flat, np.arange(len(flat))):
        raise GeometryError("untubify requires tokens in row-major order")
    return rearrange(batch.tokens, "b (gt gh gw) (a p q c) -> b (gt a) (gh p) (gw q) c",
                     gt=gt, gh=gh, gw=gw, a=a, p=p, q=q)


def patchify_frame(frame, patch: int = PATCH_SIZE) -> TokenBatch:
    """Flatten a single frame (H, W, C) or batch (B, H, W, C) into patch tokens."""
    if frame.ndim == 3:
        frame = frame[None]
    if frame.ndim != 4:
        raise GeometryError(f"expected (H, W, C) or (B, H, W, C), got {frame.shape}")
    _, h, w, _ = frame.shape
    if h % patch or w % patch or h == 0:
        raise GeometryError(f"frame {(h, w)} not divisible by patch {patch}")
    tokens = rearrange(frame, "b (gh p) (gw q) c -> b (gh gw) (p q c)", p=patch, q=patch)
    grid = (1, h // patch, w // patch)
    return TokenBatch(tokens=tokens, positions=_grid_positions(*grid), grid=grid)


@dataclass(frozen=True)
class TubeFrameMap:
    """Correspondence between tube tokens and the frame patches they cover."""

    grid: tuple[int, int, int]
    tube_frames: int = TUBE[0]

    def frames_for_tube(self, position) -> tuple[int, ...]:
        """Source frame indices covered by the tube at (t, h, w)."""
        t = int(position[0]) if not np.isscalar(position) else int(position)
        if not 0 <= t < self.grid[0]:
            raise GeometryError(f"tube time index {t} outside grid {self.grid}")
        return tuple(t * self.tube_frames + i for i in range(self.tube_frames))

    def patch_index(self, position) -> int:
        """Flat spatial patch index shared by the tube and its frames."""
        _, gh, gw = self.grid
        _, h, w = (int(x) for x in position)
        if not (0 <= h < gh and 0 <= w < gw):
            raise GeometryError(f"tube spatial index {(h, w)} outside grid {self.grid}")
        return h * gw + w

    def pairs(self):
        """All (tube_flat_index, frame_index, patch_index) correspondences."""
        gt, gh, gw = self.grid
        out = []
        for pos in _grid_positions(gt, gh, gw):
            flat = pos[0] * gh * gw + pos[1] * gw + pos[2]
            for f in self.frames_for_tube(pos):
                out.append((int(flat), f, self.patch_index(pos)))
        return out


def build_tube_frame_map(t: int, h: int, w: int, tube: tuple[int, int, int] = TUBE) -> TubeFrameMap:
    a, p, q = tube
    if t % a or h % p or w % q or t == 0:
        raise GeometryError(f"video {(t, h, w)} not divisible by tube {tube}")
    return TubeFrameMap(grid=(t // a, h // p, w // q), tube_frames=a)
