"""Frozen-feature evaluation: kNN, linear probe, segmentation, EF regression.

Clips are embedded with the (teacher) video encoder's class feature.
Video-level decisions follow the any-abnormal rule: a video is abnormal
when any of its clips is, and its score is the maximum clip score.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import tensorio
from .backbone import TokenEncoder, init_params
from .data import FrameStore, ManifestRecord, center_crop, load_manifest, tiled_clips
from .tokenizer import VideoClip, tubify

LABEL_TO_INT = {"normal": 0, "abnormal": 1}
K_CANDIDATES = (1, 3, 5, 10, 20, 50, 100, 200)


class EvalError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embeddings

@dataclass
class EmbeddingSet:
    """Per-clip embeddings with labels and the source video of each clip."""

    vectors: np.ndarray
    labels: np.ndarray
    video_ids: list[str]
    split: str = ""

    def __post_init__(self):
        if self.vectors.ndim != 2 or len(self.labels) != len(self.vectors) \
                or len(self.video_ids) != len(self.vectors):
            raise EvalError("vectors, labels and video_ids must align")

    def __len__(self):
        return len(self.vectors)

    def save(self, path):
        tensorio.save_arrays(path, {"vectors": self.vectors, "labels": self.labels},
                             {"video_ids": list(self.video_ids), "split": self.split})

    @classmethod
    def load(cls, path):
        arrays, meta = tensorio.load_arrays(path)
        return cls(vectors=arrays["vectors"], labels=arrays["labels"],
                   video_ids=list(meta["video_ids"]), split=meta.get("split", ""))


@torch.no_grad()
def extract_embedding(encoder: TokenEncoder, clip: VideoClip) -> np.ndarray:
    """Class feature of one full clip (the zero-shot representation)."""
    return embed_clips(encoder, [clip])[0]


@torch.no_grad()
def embed_clips(encoder: TokenEncoder, clips: list[VideoClip], batch_size: int = 8) -> np.ndarray:
    """Class feature of each full (unmasked) clip."""
    dtype = next(encoder.parameters()).dtype
    out = []
    for i in range(0, len(clips), batch_size):
        chunk = np.stack([c.frames for c in clips[i:i + batch_size]])
        tokens = torch.as_tensor(tubify(chunk).tokens).to(dtype)
        _, cls = encoder(tokens)
        out.append(cls.cpu().numpy().astype(np.float32))
    return np.concatenate(out, axis=0)


def embed_records(encoder: TokenEncoder, records: list[ManifestRecord], store: FrameStore,
                  clip_len: int, stride: int, split: str = "", batch_size: int = 8,
                  crop: int | None = None) -> EmbeddingSet:
    """Tile every video into deterministic clips and embed each one.

    crop: center-crop stored frames to this size first (videos may be
    rendered larger than the encoder input to leave room for training
    crops)."""
    clips, labels, ids = [], [], []
    for rec in records:
        frames = store.frames(rec)
        if crop is not None:
            frames = center_crop(frames, crop, crop)
        for clip in tiled_clips(frames, clip_len, stride, source_id=rec.video_path):
            clips.append(clip)
            labels.append(LABEL_TO_INT[rec.label])
            ids.append(rec.video_path)
    if not clips:
        raise EvalError(f"no clips to embed for split {split!r}")
    vectors = embed_clips(encoder, clips, batch_size=batch_size)
    return EmbeddingSet(vectors=vectors, labels=np.asarray(labels, dtype=np.int64),
                        video_ids=ids, split=split)


# ---------------------------------------------------------------------------
# weighted kNN

def knn_predict(support: EmbeddingSet, queries: np.ndarray, k: int,
                temp: float = 0.07, weighting: str = "exp"):
    """Cosine kNN vote. Returns (labels, abnormal scores) per query row.

    Scores are the abnormal share of the (optionally exp(sim/temp)
    weighted) vote, so 0.5 is the decision boundary.
    """
    if weighting not in ("exp", "uniform"):
        raise EvalError(f"weighting must be 'exp' or 'uniform', got {weighting!r}")
    if len(support) == 0:
        raise EvalError("empty support set")
    k = min(k, len(support))
    s = support.vectors / np.maximum(np.linalg.norm(support.vectors, axis=1, keepdims=True), 1e-12)
    q = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    sims = q @ s.T  # (m, n)
    nn_idx = np.argpartition(-sims, kth=k - 1, axis=1)[:, :k]
    rows = np.arange(len(q))[:, None]
    nn_sims = sims[rows, nn_idx]
    nn_labels = support.labels[nn_idx]
    if weighting == "exp":
        w = np.exp(nn_sims / temp)
    else:
        w = np.ones_like(nn_sims)
    score = (w * (nn_labels == 1)).sum(axis=1) / w.sum(axis=1)
    return (score >= 0.5).astype(np.int64), score


def knn_classify(support: EmbeddingSet, query: np.ndarray, k: int,
                 temp: float = 0.07, weighting: str = "exp"):
    """Single-query form of knn_predict: (label, abnormal_score)."""
    labels, scores = knn_predict(support, np.asarray(query)[None, :], k, temp, weighting)
    return int(labels[0]), float(scores[0])


def aggregate_video(video_ids, clip_labels, clip_scores):
    """Any-abnormal rule per video: label = any clip abnormal, score =
    max clip score. Returns (ids, labels, scores) ordered by first
    appearance."""
    order: dict[str, int] = {}
    for vid in video_ids:
        order.setdefault(vid, len(order))
    labels = np.zeros(len(order), dtype=np.int64)
    scores = np.full(len(order), -np.inf)
    for vid, lab, sc in zip(video_ids, clip_labels, clip_scores):
        i = order[vid]
        labels[i] = max(labels[i], int(lab))
        scores[i] = max(scores[i], float(sc))
    return list(order), labels, scores


def video_truth(embeddings: EmbeddingSet):
    """Per-video ground truth from the clip rows (clips agree by construction)."""
    order: dict[str, int] = {}
    truths = []
    for vid, lab in zip(embeddings.video_ids, embeddings.labels):
        if vid not in order:
            order[vid] = len(order)
            truths.append(int(lab))
    return list(order), np.asarray(truths, dtype=np.int64)


def _knn_video_metrics(support, queries: EmbeddingSet, k, temp, weighting, f1_average):
    labels, scores = knn_predict(support, queries.vectors, k, temp, weighting)
    ids, vl, vs = aggregate_video(queries.video_ids, labels, scores)
    tids, truth = video_truth(queries)
    assert ids == tids
    return compute_metrics(vl, vs, truth, f1_average=f1_average)


def select_k(support: EmbeddingSet, val: EmbeddingSet, candidates=K_CANDIDATES,
             temp: float = 0.07, weighting: str = "exp", f1_average: str = "macro"):
    """Pick k by video-level balanced accuracy on the validation split.
    Ties go to the smallest k. Returns (k, {k: balanced_accuracy})."""
    usable = [k for k in candidates if k <= len(support)]
    if not usable:
        usable = [len(support)]
    table = {}
    for k in usable:
        table[k] = _knn_video_metrics(support, val, k, temp, weighting, f1_average).balanced_accuracy
    best = max(sorted(table), key=lambda k: table[k])
    return best, table


def knn_evaluate(support: EmbeddingSet, val: EmbeddingSet, test: EmbeddingSet,
                 candidates=K_CANDIDATES, temp: float = 0.07, weighting: str = "exp",
                 f1_average: str = "macro") -> dict:
    """Full zero-shot protocol: support from train, k chosen on val,
    metrics reported on test (video level)."""
    best, table = select_k(support, val, candidates, temp, weighting, f1_average)
    val_report = _knn_video_metrics(support, val, best, temp, weighting, f1_average)
    test_report = _knn_video_metrics(support, test, best, temp, weighting, f1_average)
    return {"k": best, "k_table": table, "val": val_report, "test": test_report}


# ---------------------------------------------------------------------------
# linear probe

def _l2n(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def linear_probe_fit(train: EmbeddingSet, epochs: int = 30, lr: float = 0.05,
                     weight_decay: float = 0.0) -> nn.Linear:
    """Full-batch logistic regression on L2-normalized embeddings.
    Zero init keeps the fit deterministic without touching any RNG."""
    if len(np.unique(train.labels)) < 2:
        raise EvalError("linear probe needs both classes in the training embeddings")
    x = torch.from_numpy(_l2n(train.vectors.astype(np.float64)))
    y = torch.from_numpy(train.labels)
    probe = nn.Linear(x.shape[1], 2).double()
    nn.init.zeros_(probe.weight)
    nn.init.zeros_(probe.bias)
    opt = torch.optim.Adam(probe.parameters(), lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        opt.zero_grad()
        loss = F.cross_entropy(probe(x), y)
        loss.backward()
        opt.step()
    return probe


@torch.no_grad()
def linear_probe_predict(probe: nn.Linear, vectors: np.ndarray):
    x = torch.from_numpy(_l2n(vectors.astype(np.float64)))
    prob = F.softmax(probe(x), dim=-1)[:, 1].numpy()
    return (prob >= 0.5).astype(np.int64), prob


def probe_evaluate(train: EmbeddingSet, test: EmbeddingSet, epochs: int = 30,
                   lr: float = 0.05, f1_average: str = "macro") -> dict:
    probe = linear_probe_fit(train, epochs=epochs, lr=lr)
    labels, scores = linear_probe_predict(probe, test.vectors)
    ids, vl, vs = aggregate_video(test.video_ids, labels, scores)
    tids, truth = video_truth(test)
    assert ids == tids
    return {"test": compute_metrics(vl, vs, truth, f1_average=f1_average)}


# ---------------------------------------------------------------------------
# metrics

@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    balanced_accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def confusion_counts(pred: np.ndarray, true: np.ndarray):
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    tn = int(np.sum(~pred & ~true))
    return tp, fp, fn, tn


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def compute_metrics(pred_labels, scores, true_labels, f1_average: str = "macro") -> MetricsReport:
    """Binary classification metrics in percent; abnormal (1) is the
    positive class for precision and recall. f1_average: 'macro' averages
    the per-class F1s, 'binary' reports the abnormal-class F1 only."""
    if f1_average not in ("macro", "binary"):
        raise EvalError(f"f1_average must be 'macro' or 'binary', got {f1_average!r}")
    tp, fp, fn, tn = confusion_counts(pred_labels, true_labels)
    n = tp + fp + fn + tn
    if n == 0:
        raise EvalError("no predictions to score")
    sens = _safe_div(tp, tp + fn)
    spec = _safe_div(tn, tn + fp)
    prec_ab = _safe_div(tp, tp + fp)
    f1_ab = _safe_div(2 * prec_ab * sens, prec_ab + sens)
    prec_no = _safe_div(tn, tn + fn)
    f1_no = _safe_div(2 * prec_no * spec, prec_no + spec)
    f1 = (f1_ab + f1_no) / 2 if f1_average == "macro" else f1_ab
    true_arr = np.asarray(true_labels).astype(int)
    auc = None
    if scores is not None and 0 < true_arr.sum() < len(true_arr):
        auc = auc_score(np.asarray(scores, dtype=np.float64), true_arr) * 100.0
    return MetricsReport(
        accuracy=100.0 * (tp + tn) / n,
        balanced_accuracy=100.0 * (sens + spec) / 2,
        precision=100.0 * prec_ab,
        recall=100.0 * sens,
        f1=100.0 * f1,
        auc=auc,
        tp=tp, fp=fp, fn=fn, tn=tn)


def _rank_with_ties(x: np.ndarray) -> np.ndarray:
    """1-based ranks, ties get the average rank of their group."""
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    sx = x[order]
    i = 0
    while i < len(sx):
        j = i
        while j + 1 < len(sx) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random abnormal outranks a random normal;
    ties count half. Equals the Mann-Whitney statistic."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvalError("AUC needs both classes present")
    ranks = _rank_with_ties(np.asarray(scores, dtype=np.float64))
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def dice_score(pred, true) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as a perfect 1.0."""
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise EvalError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    denom = int(pred.sum()) + int(true.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.sum(pred & true)) / denom


# ---------------------------------------------------------------------------
# segmentation head

class SegHead(nn.Module):
    """Linear token projection followed by Conv2D upsampling blocks.

    Each block doubles the resolution; four of them take the 16x16-pixel
    token grid back to full resolution. The final classifier conv starts
    at zero so an untrained head is exactly uniform."""

    def __init__(self, width: int, n_classes: int = 2, hidden: int = 64):
        super().__init__()
        self.inp = nn.Linear(width, hidden)
        self.blocks = nn.ModuleList(
            nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(hidden, hidden, 3, padding=1),
                nn.GELU(),
            ) for _ in range(4))
        self.out = nn.Conv2d(hidden, n_classes, 1)

    def reset_parameters(self, rng: np.random.Generator):
        init_params(self, rng)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, grid_feats: torch.Tensor) -> torch.Tensor:
        # grid_feats: (B, GH, GW, width)
        x = self.inp(grid_feats).permute(0, 3, 1, 2)
        for blk in self.blocks:
            x = blk(x)
        return self.out(x)


@torch.no_grad()
def clip_grid_features(encoder: TokenEncoder, clips: list[VideoClip], frame_indices) -> torch.Tensor:
    """Frozen token features of each clip at the grid slot containing the
    requested frame. Returns (B, GH, GW, width)."""
    dtype = next(encoder.parameters()).dtype
    chunk = np.stack([c.frames for c in clips])
    batch = tubify(chunk)
    tokens = torch.as_tensor(batch.tokens).to(dtype)
    feats, _ = encoder(tokens)
    gt, gh, gw = batch.grid
    feats = feats.view(len(clips), gt, gh, gw, -1)
    slots = torch.as_tensor([int(f) // 2 for f in frame_indices])
    return feats[torch.arange(len(clips)), slots]


def train_seg_head(encoder: TokenEncoder, clips: list[VideoClip], masks: list[np.ndarray],
                   frame_indices, rng: np.random.Generator, epochs: int = 60,
                   lr: float = 1e-2, hidden: int = 64) -> SegHead:
    """Fit the segmentation head on frozen encoder features."""
    width = encoder.cfg.width
    head = SegHead(width, n_classes=2, hidden=hidden)
    head.reset_parameters(rng)
    feats = clip_grid_features(encoder, clips, frame_indices).float()
    target = torch.as_tensor(np.stack([np.asarray(m).astype(np.int64) for m in masks]))
    opt = torch.optim.Adam(head.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        logits = head(feats)
        loss = F.cross_entropy(logits, target)
        loss.backward()
        opt.step()
    return head


@torch.no_grad()
def predict_segmentation(encoder: TokenEncoder, head: SegHead, clips: list[VideoClip],
                         frame_indices) -> np.ndarray:
    feats = clip_grid_features(encoder, clips, frame_indices).float()
    logits = head(feats)
    return logits.argmax(dim=1).cpu().numpy().astype(bool)


def evaluate_segmentation(encoder, head, clips, masks, frame_indices) -> dict:
    pred = predict_segmentation(encoder, head, clips, frame_indices)
    scores = [dice_score(pred[i], masks[i]) for i in range(len(clips))]
    return {"dice_mean": float(np.mean(scores)), "dice_per_clip": [float(s) for s in scores]}


# ---------------------------------------------------------------------------
# ejection-fraction regression

def finetune_parameters(encoder: TokenEncoder, last_k: int) -> list[nn.Parameter]:
    """Parameters of exactly the last k transformer blocks."""
    if not 1 <= last_k <= len(encoder.blocks):
        raise EvalError(f"last_k {last_k} outside 1..{len(encoder.blocks)}")
    return [p for blk in encoder.blocks[-last_k:] for p in blk.parameters()]


class EfHead(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc = nn.Linear(width, 1)

    def forward(self, x):
        return self.fc(x).squeeze(-1)


def fit_ef_head(encoder: TokenEncoder, clips: list[VideoClip], efs, mode: str = "probe",
                last_k: int = 3, epochs: int = 60, lr: float = 1e-2,
                batch_size: int = 8):
    """Regress ejection fraction from the class feature.

    'probe' trains only the head on frozen features; 'finetune_last_k'
    also unfreezes the last_k encoder blocks (on a copy, the caller's
    encoder is untouched). Targets are scaled to [0, 1] internally. The
    head bias starts at the train-target mean."""
    if mode not in ("probe", "finetune_last_k"):
        raise EvalError(f"mode must be 'probe' or 'finetune_last_k', got {mode!r}")
    y = torch.as_tensor(np.asarray(efs, dtype=np.float64) / 100.0).float()
    head = EfHead(encoder.cfg.width)
    nn.init.zeros_(head.fc.weight)
    with torch.no_grad():
        head.fc.bias.fill_(float(y.mean()))

    if mode == "probe":
        feats = torch.from_numpy(embed_clips(encoder, clips, batch_size=batch_size))
        opt = torch.optim.Adam(head.parameters(), lr=lr)
        for _ in range(epochs):
            opt.zero_grad()
            loss = F.mse_loss(head(feats), y)
            loss.backward()
            opt.step()
        return encoder, head

    enc = copy.deepcopy(encoder)
    for p in enc.parameters():
        p.requires_grad_(False)
    tune = finetune_parameters(enc, last_k)
    for p in tune:
        p.requires_grad_(True)
    opt = torch.optim.Adam(list(tune) + list(head.parameters()), lr=lr)
    dtype = next(enc.parameters()).dtype
    chunk = np.stack([c.frames for c in clips])
    tokens = torch.as_tensor(tubify(chunk).tokens).to(dtype)
    for _ in range(epochs):
        opt.zero_grad()
        _, cls = enc(tokens)
        loss = F.mse_loss(head(cls.float()), y)
        loss.backward()
        opt.step()
    return enc, head


@torch.no_grad()
def predict_ef(encoder: TokenEncoder, head: EfHead, clips: list[VideoClip],
               batch_size: int = 8) -> np.ndarray:
    feats = torch.from_numpy(embed_clips(encoder, clips, batch_size=batch_size))
    return (head(feats).cpu().numpy() * 100.0).astype(np.float64)


def ef_metrics(pred, true) -> dict:
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    err = pred - true
    return {"mae": float(np.abs(err).mean()), "rmse": float(np.sqrt((err ** 2).mean()))}


# ---------------------------------------------------------------------------
# checkpoint-level driver

PROTOCOLS = ("knn", "probe", "segment", "regress-ef")


def _flatten_report(report: dict, prefix: str = "") -> dict:
    flat = {}
    for key, val in report.items():
        name = f"{prefix}{key}" if not prefix else f"{prefix}.{key}"
        if isinstance(val, dict):
            flat.update(_flatten_report(val, name))
        elif isinstance(val, (int, float, str)) or val is None:
            flat[name] = val
    return flat


def write_report(report: dict, path) -> None:
    """JSON report plus a one-row CSV next to it for table assembly."""
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    flat = _flatten_report({k: v for k, v in report.items() if k != "config"})
    csv_path = path.with_suffix(".csv")
    keys = sorted(flat)
    with open(csv_path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join("" if flat[k] is None else str(flat[k]) for k in keys) + "\n")


def evaluate_checkpoint(checkpoint_path, data_dir, protocols=("knn", "probe"),
                        encoder: str = "teacher", out_path=None,
                        clip_len: int | None = None, stride: int | None = None,
                        f1_average: str = "macro") -> dict:
    """Run the requested protocols against a pretraining checkpoint.

    knn: support = train split, k chosen on val, reported on test.
    probe: fit on the labeled val split, reported on test.
    segment / regress-ef: fit on train, reported on test.
    """
    from .trainer import load_checkpoint  # local import to avoid a cycle

    bad = [p for p in protocols if p not in PROTOCOLS]
    if bad:
        raise EvalError(f"unknown protocols {bad}; choose from {PROTOCOLS}")
    state, cfg = load_checkpoint(checkpoint_path)
    enc = state.model.video.teacher if encoder == "teacher" else state.model.video.student
    enc.eval()
    clip_len = clip_len or cfg.frames_per_clip
    stride = stride or cfg.clip_stride

    data_dir = Path(data_dir)
    records = load_manifest(data_dir / "manifest.csv")
    store = FrameStore(data_dir)
    by_split = {s: [r for r in records if r.split == s] for s in ("train", "val", "test")}

    report: dict = {"encoder": encoder, "checkpoint": str(checkpoint_path),
                    "config": cfg.to_mapping()}
    emb = {}
    if "knn" in protocols or "probe" in protocols:
        emb = {s: embed_records(enc, rs, store, clip_len, stride, split=s, crop=cfg.image_size)
               for s, rs in by_split.items() if rs}
    if "knn" in protocols:
        knn = knn_evaluate(emb["train"], emb["val"], emb["test"], f1_average=f1_average)
        report["knn"] = {"k": knn["k"], "k_table": {str(k): v for k, v in knn["k_table"].items()},
                         "val": knn["val"].to_dict(), "test": knn["test"].to_dict()}
    if "probe" in protocols:
        probe = probe_evaluate(emb["val"], emb["test"], f1_average=f1_average)
        report["probe"] = {"test": probe["test"].to_dict()}
    if "segment" in protocols:
        report["segment"] = _seg_task(enc, by_split, store, clip_len, stride, cfg.image_size)
    if "regress-ef" in protocols:
        report["regress-ef"] = _ef_task(enc, by_split, store, clip_len, stride, cfg.image_size)

    if out_path is not None:
        write_report(report, out_path)
    return report


def _first_clip(store, rec, clip_len, stride, crop):
    frames = store.frames(rec)
    if crop is not None:
        frames = center_crop(frames, crop, crop)
    return tiled_clips(frames, clip_len, stride, source_id=rec.video_path)[0]


def _seg_task(enc, by_split, store, clip_len, stride, crop) -> dict:
    def gather(split):
        clips, masks = [], []
        for rec in by_split[split]:
            extras = store.extras(rec)
            if "chamber" not in extras:
                continue
            clip = _first_clip(store, rec, clip_len, stride, crop)
            mask = extras["chamber"][clip.frame_span[0]]
            if crop is not None:
                mask = center_crop(mask[..., None], crop, crop)[..., 0]
            clips.append(clip)
            masks.append(mask.astype(bool))
        return clips, masks

    train_clips, train_masks = gather("train")
    test_clips, test_masks = gather("test")
    if not train_clips or not test_clips:
        raise EvalError("segmentation task needs chamber masks stored with the videos")
    rng = np.random.default_rng(0)
    frame0 = [0] * len(train_clips)
    head = train_seg_head(enc, train_clips, train_masks, frame0, rng)
    out = evaluate_segmentation(enc, head, test_clips, test_masks, [0] * len(test_clips))
    return {"dice_mean": out["dice_mean"], "n_test": len(test_clips)}


def _ef_task(enc, by_split, store, clip_len, stride, crop) -> dict:
    def gather(split):
        clips, efs = [], []
        for rec in by_split[split]:
            if rec.ef is None:
                continue
            clips.append(_first_clip(store, rec, clip_len, stride, crop))
            efs.append(rec.ef)
        return clips, efs

    train_clips, train_efs = gather("train")
    test_clips, test_efs = gather("test")
    if not train_clips or not test_clips:
        raise EvalError("EF regression needs ef values in the manifest")
    out = {}
    last_k = min(3, len(enc.blocks))
    for mode in ("probe", "finetune_last_k"):
        enc_m, head = fit_ef_head(enc, train_clips, train_efs, mode=mode, last_k=last_k)
        pred = predict_ef(enc_m, head, test_clips)
        out[mode] = ef_metrics(pred, test_efs)
    return out
