"""Datasets: manifests, synthetic echo-like videos and clip sampling.

The synthetic generator renders a speckled, pulsating bright ellipse
(a cartoon cardiac chamber) on a noisy background. Every video contracts
with the same local amplitude; what varies with disease is the timing.
Healthy walls contract in phase, sick ones with a phase spread around
the wall (dyssynchrony), which shrinks the net area excursion and with
it the ejection fraction. Because the phase shift leaves each pixel's
intensity distribution over a cycle unchanged, time-averaged appearance
carries no label information; only coordinated motion does.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .tokenizer import VideoClip

MANIFEST_COLUMNS = ["video_path", "split", "label", "ef", "view", "patient_id"]
SPLITS = ("train", "val", "test")
LABEL_NORMAL = "normal"
LABEL_ABNORMAL = "abnormal"

EF_LOW = 45.0
EF_HIGH = 75.0


class ManifestError(ValueError):
    pass


class VideoFormatError(ValueError):
    pass


def label_from_ef(ef: float) -> str:
    """Clinical rule: abnormal when ejection fraction is below 45 or above 75."""
    if not 0.0 <= ef <= 100.0:
        raise ManifestError(f"ejection fraction {ef} outside [0, 100]")
    return LABEL_ABNORMAL if (ef < EF_LOW or ef > EF_HIGH) else LABEL_NORMAL


@dataclass(frozen=True)
class ManifestRecord:
    video_path: str
    split: str
    label: str
    ef: float | None
    view: str
    patient_id: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        if self.label not in (LABEL_NORMAL, LABEL_ABNORMAL):
            raise ManifestError(f"unknown label {self.label!r}")
        if self.ef is not None and label_from_ef(self.ef) != self.label:
            raise ManifestError(
                f"label {self.label!r} inconsistent with ef {self.ef} for {self.video_path}")


def load_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header {header} != {MANIFEST_COLUMNS}")
        records = []
        seen = set()
        for i, row in enumerate(reader, start=2):
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{i}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            vp, split, label, ef, view, pid = row
            if vp in seen:
                raise ManifestError(f"{path}:{i}: duplicate video_path {vp!r}")
            seen.add(vp)
            records.append(ManifestRecord(
                video_path=vp, split=split, label=label,
                ef=float(ef) if ef != "" else None, view=view, patient_id=pid))
    return records


def write_manifest(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow([r.video_path, r.split, r.label,
                             "" if r.ef is None else f"{r.ef:.2f}", r.view, r.patient_id])


def pretraining_records(records) -> list[ManifestRecord]:
    """Pretraining sees only normal training videos; abnormal train records
    exist solely as labeled support for downstream evaluation."""
    return [r for r in records if r.split == "train" and r.label == LABEL_NORMAL]


# ---------------------------------------------------------------------------
# video storage

def _read_container_video(path):
    arrays, meta = tensorio.load_arrays(path)
    if "frames" not in arrays:
        raise VideoFormatError(f"{path}: container has no 'frames' array")
    return arrays, meta


_VIDEO_READERS = {".dsct": _read_container_video}


def register_video_reader(suffix: str, reader) -> None:
    """Plug in a loader for another on-disk video format.

    reader(path) must return (arrays, meta) with arrays["frames"] a
    uint8 (T, H, W, C) stack.
    """
    _VIDEO_READERS[suffix] = reader


def read_video(path):
    path = Path(path)
    reader = _VIDEO_READERS.get(path.suffix)
    if reader is None:
        raise VideoFormatError(
            f"no reader for {path.suffix!r} (registered: {sorted(_VIDEO_READERS)})")
    return reader(path)


def write_video(path, frames: np.ndarray, extras: dict | None = None, meta: dict | None = None) -> None:
    if frames.dtype != np.uint8 or frames.ndim != 4:
        raise VideoFormatError(f"frames must be uint8 (T, H, W, C), got {frames.dtype} {frames.shape}")
    arrays = {"frames": frames}
    arrays.update(extras or {})
    tensorio.save_arrays(path, arrays, meta or {})


def ingest_frames(frames: np.ndarray) -> np.ndarray:
    """uint8 (T, H, W[, C]) -> float32 in [0, 1] with an explicit channel axis."""
    if frames.ndim == 3:
        frames = frames[..., None]
    if frames.dtype == np.uint8:
        return frames.astype(np.float32) / 255.0
    return np.clip(frames.astype(np.float32), 0.0, 1.0)


class FrameStore:
    """In-memory cache of decoded video frame stacks, keyed by manifest path."""

    def __init__(self, base_dir):
        self.base_dir = Path(base_dir)
        self._cache: dict[str, np.ndarray] = {}
        self._extras: dict[str, dict] = {}

    def frames(self, record: ManifestRecord) -> np.ndarray:
        if record.video_path not in self._cache:
            arrays, _ = read_video(self.base_dir / record.video_path)
            self._cache[record.video_path] = arrays["frames"]
            self._extras[record.video_path] = {k: v for k, v in arrays.items() if k != "frames"}
        return self._cache[record.video_path]

    def extras(self, record: ManifestRecord) -> dict:
        self.frames(record)
        return self._extras[record.video_path]


# ---------------------------------------------------------------------------
# clip sampling

def clip_span(clip_len: int, stride: int) -> int:
    return (clip_len - 1) * stride + 1


def center_crop(frames: np.ndarray, height: int, width: int) -> np.ndarray:
    """Crop (..., H, W, C) frames to the central height x width window."""
    h, w = frames.shape[-3], frames.shape[-2]
    if h < height or w < width:
        raise ValueError(f"cannot crop {h}x{w} frames to {height}x{width}")
    top = (h - height) // 2
    left = (w - width) // 2
    return frames[..., top:top + height, left:left + width, :]


def take_clip(frames: np.ndarray, start: int, clip_len: int, stride: int) -> np.ndarray:
    """Strided frame selection starting at start, wrapping around (loop
    padding) when the video is shorter than the clip span."""
    n = frames.shape[0]
    if n == 0:
        raise ValueError("empty video")
    idx = (start + stride * np.arange(clip_len)) % n
    return frames[idx]


def sample_clip_start(n_frames: int, clip_len: int, stride: int, rng: np.random.Generator) -> int:
    span = clip_span(clip_len, stride)
    last = n_frames - span
    if last <= 0:
        return 0
    return int(rng.integers(0, last + 1))


def tiled_clip_starts(n_frames: int, clip_len: int, stride: int) -> list[int]:
    """Deterministic non-overlapping clip starts covering the video."""
    span = clip_span(clip_len, stride)
    count = max(1, n_frames // span)
    return [i * span for i in range(count)]


def sample_clip(frames: np.ndarray, clip_len: int, stride: int,
                rng: np.random.Generator | None = None, source_id: str = "",
                mode: str = "random_start"):
    """One clip from a uniform random valid start, or (mode='tiled') the
    deterministic list of non-overlapping clips covering the video."""
    if mode == "tiled":
        return tiled_clips(frames, clip_len, stride, source_id=source_id)
    if mode != "random_start":
        raise ValueError(f"mode must be 'random_start' or 'tiled', got {mode!r}")
    if rng is None:
        raise ValueError("random_start mode needs an rng")
    start = sample_clip_start(frames.shape[0], clip_len, stride, rng)
    sel = take_clip(frames, start, clip_len, stride)
    return VideoClip(frames=ingest_frames(sel), source_id=source_id, frame_span=(start, stride))


def tiled_clips(frames: np.ndarray, clip_len: int, stride: int, source_id: str = "") -> list[VideoClip]:
    return [VideoClip(frames=ingest_frames(take_clip(frames, s, clip_len, stride)),
                      source_id=source_id, frame_span=(s, stride))
            for s in tiled_clip_starts(frames.shape[0], clip_len, stride)]


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SyntheticConfig:
    n_train_normal: int = 40
    n_train_abnormal: int = 40
    n_val_normal: int = 10
    n_val_abnormal: int = 10
    n_test_normal: int = 10
    n_test_abnormal: int = 10
    frames_per_video: int = 60
    height: int = 112
    width: int = 112
    channels: int = 1
    ef_normal: tuple[float, float] = (66.0, 72.0)
    ef_abnormal: tuple[float, float] = (22.0, 34.0)
    amp_range: tuple[float, float] = (0.48, 0.53)
    axis_jitter: float = 0.4
    speckle: float = 0.25
    frame_noise: float = 0.02
    gain_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.ef_normal, self.ef_abnormal):
            if not (0 <= lo <= hi <= 100):
                raise ValueError(f"bad ef range ({lo}, {hi})")
        for lo, hi in (self.ef_normal, self.ef_abnormal):
            if label_from_ef(lo) != label_from_ef(hi):
                raise ValueError(f"ef range ({lo}, {hi}) straddles the decision rule")
        if not 0.0 < self.amp_range[0] <= self.amp_range[1] < 1.0:
            raise ValueError(f"bad amp range {self.amp_range}")
        top = 100.0 * (1.0 - (1.0 - self.amp_range[0]) ** 2)
        want = max(self.ef_normal[1], self.ef_abnormal[1])
        if top < want:
            raise ValueError(
                f"amplitude {self.amp_range[0]} caps ef at {top:.1f}, below requested {want}")
        if self.height % 16 or self.width % 16:
            raise ValueError("height and width must be multiples of 16")
        if self.frames_per_video < 2 or self.frames_per_video % 2:
            raise ValueError("frames_per_video must be even and >= 2")
        if not 0.0 <= self.gain_jitter < 1.0:
            raise ValueError("gain_jitter must be in [0, 1)")
        if not 0.0 <= self.axis_jitter <= math.pi:
            raise ValueError("axis_jitter must be in [0, pi]")


DELTA_MAX = 3.9  # phase spread where area-excursion EF stops falling


def ef_of_motion(amp: float, delta: float, a0: float, b0: float, theta0: float,
                 n_theta: int = 192, n_t: int = 96) -> float:
    """Area-based ejection fraction of a wall contracting by fraction amp
    with local phase lag (delta/2)*cos(theta - theta0) around the chamber.

    theta is the image-plane polar angle; a0 scales the vertical axis and
    b0 the horizontal one, matching the renderer. In-phase walls
    (delta=0) give the textbook EF = 1 - (1 - amp)^2; a phase spread
    makes regions contract against each other, so less area is expelled
    per beat even though every wall segment moves just as far.
    """
    theta = np.linspace(0.0, 2.0 * np.pi, n_theta, endpoint=False)
    phi = 0.5 * delta * np.cos(theta - theta0)
    r2 = (a0 * b0) ** 2 / ((a0 * np.cos(theta)) ** 2 + (b0 * np.sin(theta)) ** 2)
    ts = np.linspace(0.0, 2.0 * np.pi, n_t, endpoint=False)
    u = 0.5 * (1.0 - np.cos(ts[:, None] - phi[None, :]))
    s = 1.0 - amp * u
    area = (r2[None, :] * s * s).mean(axis=1)
    return float(100.0 * (1.0 - area.min() / area.max()))


def solve_delta(amp: float, ef: float, a0: float, b0: float, theta0: float,
                tol: float = 0.05) -> float | None:
    """Phase spread that hits the requested ejection fraction, or None
    when even DELTA_MAX cannot bring EF down that far for this geometry.
    EF is monotone decreasing in delta on [0, DELTA_MAX], so bisect."""
    lo, hi = 0.0, DELTA_MAX
    if ef > ef_of_motion(amp, lo, a0, b0, theta0) + tol:
        return None
    if ef < ef_of_motion(amp, hi, a0, b0, theta0) - tol:
        return None
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if ef_of_motion(amp, mid, a0, b0, theta0) > ef:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _render_video(rng: np.random.Generator, cfg: SyntheticConfig, ef: float):
    T, H, W = cfg.frames_per_video, cfg.height, cfg.width
    amp = rng.uniform(*cfg.amp_range)

    # geometry: a vertically elongated chamber, so the opposing phase lobes
    # sit on the long axis where they control most of the area. The lag
    # axis follows the long axis, jittered so it is not a pixel template.
    # Jitter ranges are kept moderate: enough that no single pixel or
    # patch statistic identifies a video, narrow enough that nuisance
    # variation does not drown the motion signal in embedding space.
    for _ in range(16):
        a0 = rng.uniform(0.28, 0.34) * H
        b0 = a0 * rng.uniform(0.70, 0.85)
        cy = H / 2 + rng.uniform(-0.05, 0.05) * H
        cx = W / 2 + rng.uniform(-0.05, 0.05) * W
        theta0 = math.pi / 2 + rng.uniform(-cfg.axis_jitter, cfg.axis_jitter)
        delta = solve_delta(amp, ef, a0, b0, theta0)
        if delta is not None:
            break
    else:
        raise ValueError(f"no phase spread reaches ef {ef} at amplitude {amp}")
    freq = rng.uniform(1.0 / 17.0, 1.0 / 15.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)

    # per-video acquisition gain: a nuisance that dominates raw-pixel
    # statistics while carrying no label information
    gain = 1.0 + rng.uniform(-cfg.gain_jitter, cfg.gain_jitter)

    speckle = 1.0 + cfg.speckle * (rng.random((H, W)) - 0.5) * 2.0
    # tissue texture lives on elliptical coordinates (d, theta) so it advects
    # with the wall: contraction compresses the pattern, giving every interior
    # pixel a temporal signal proportional to the local displacement
    om_r = 32.0
    om_t = rng.integers(7, 10)
    ph_r = rng.uniform(0.0, 2.0 * math.pi)
    ph_t = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    theta = np.arctan2(yy - cy, xx - cx)
    phi = 0.5 * delta * np.cos(theta - theta0)
    d_base = np.sqrt(((yy - cy) / a0) ** 2 + ((xx - cx) / b0) ** 2)

    frames = np.empty((T, H, W), dtype=np.float64)
    chamber = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        u = 0.5 * (1.0 - np.cos(2.0 * math.pi * freq * t + phase - phi))
        d = d_base / (1.0 - amp * u)
        alpha = np.clip((1.0 - d) / 0.08 + 0.5, 0.0, 1.0)  # soft rim
        tissue = 1.0 + cfg.speckle * np.sin(om_r * d + ph_r) * np.sin(om_t * theta + ph_t)
        grain = alpha * tissue + (1.0 - alpha) * speckle
        img = (0.18 + alpha * 0.55) * grain + rng.normal(0.0, cfg.frame_noise, (H, W))
        frames[t] = np.clip(img * gain, 0.0, 1.0)
        chamber[t] = (d <= 1.0).astype(np.uint8)

    frames_u8 = np.round(frames * 255.0).astype(np.uint8)
    frames_u8 = np.repeat(frames_u8[..., None], cfg.channels, axis=-1)
    return frames_u8, chamber, amp, delta


def generate_dataset(cfg: SyntheticConfig, out_dir) -> Path:
    """Render the full synthetic corpus and write manifest.csv.

    Returns the manifest path. Videos land in out_dir/videos/ as
    container files holding the uint8 frames, the per-frame chamber
    mask, and the generation metadata.
    """
    out_dir = Path(out_dir)
    video_dir = out_dir / "videos"
    video_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    plan = []
    for split in SPLITS:
        for label in (LABEL_NORMAL, LABEL_ABNORMAL):
            n = getattr(cfg, f"n_{split}_{label}")
            plan.extend((split, label) for _ in range(n))

    records = []
    for idx, (split, label) in enumerate(plan):
        lo, hi = cfg.ef_normal if label == LABEL_NORMAL else cfg.ef_abnormal
        ef = float(rng.uniform(lo, hi))
        frames, chamber, amp, delta = _render_video(rng, cfg, ef)
        rel = f"videos/v{idx:04d}.dsct"
        write_video(out_dir / rel, frames, extras={"chamber": chamber},
                    meta={"ef": round(ef, 4), "amp": round(amp, 6),
                          "delta": round(delta, 6), "label": label, "split": split})
        records.append(ManifestRecord(video_path=rel, split=split, label=label,
                                      ef=round(ef, 2), view="synthetic", patient_id=f"p{idx:04d}"))

    manifest_path = out_dir / "manifest.csv"
    write_manifest(records, manifest_path)
    return manifest_path


def ef_from_masks(chamber: np.ndarray) -> float:
    """Ejection fraction implied by a (T, H, W) chamber-mask stack:
    one minus the ratio of smallest to largest area over the video.
    Applying the clinical threshold to this value recovers the label
    without any learning, which is the separability check the
    evaluation suite leans on."""
    areas = np.asarray(chamber).reshape(chamber.shape[0], -1).sum(axis=1).astype(np.float64)
    if areas.max() <= 0:
        raise ValueError("empty chamber masks")
    return float(100.0 * (1.0 - areas.min() / areas.max()))


def motion_energy(frames: np.ndarray) -> float:
    """Mean squared difference between consecutive frames. A one-number
    motion feature used to sanity-check that the synthetic classes are
    separable before any training happens."""
    f = ingest_frames(frames) if frames.dtype == np.uint8 else np.asarray(frames, dtype=np.float32)
    if f.shape[0] < 2:
        raise ValueError("need at least two frames")
    diff = np.diff(f, axis=0)
    return float(np.mean(diff * diff))
