"""Average precision, the six-task AP suite, topK accuracy and summary stats.

Undefined APs (no positive frames) are represented as ``nan``.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import GroundTruth, Run, check_aligned
from .disentangle import disentangle_labels, disentangle_probs
from .taxonomy import TASKS, TripletTaxonomy

DEFAULT_KS = (5, 10, 15, 20)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP of one class.

    Samples are ranked by descending score, ties broken by ascending sample
    index; AP is the mean of precision@k over the ranks k of the positives.
    Returns ``nan`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D arrays of equal length")
    if scores.size == 0:
        raise ValueError("need at least one sample")
    return float(video_class_ap(scores[:, None], labels[:, None])[0])


def video_class_ap(scores, labels) -> np.ndarray:
    """Column-wise AP over the frames of one video; ``nan`` for columns without positives."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"shape mismatch: scores {scores.shape}, labels {labels.shape}")
    if np.isnan(scores).any():
        raise ValueError("NaN score")
    # stable sort keeps equal scores in ascending frame order
    order = np.argsort(-scores, axis=0, kind="stable")
    ranked = np.take_along_axis(labels, order, axis=0).astype(np.float64)
    hits = np.cumsum(ranked, axis=0)
    ranks = np.arange(1, scores.shape[0] + 1, dtype=np.float64)[:, None]
    positives = ranked.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        ap = (ranked * hits / ranks).sum(axis=0) / positives
    ap[positives == 0] = np.nan
    return ap


def aggregate_ap(per_video, class_mask=None) -> tuple[np.ndarray, float]:
    """Average per-video class APs categorically, then over classes.

    Each class is averaged over the videos where it is defined. The mean
    covers classes that are both in ``class_mask`` and defined somewhere.
    """
    per_video = np.asarray(per_video, dtype=np.float64)
    if per_video.ndim != 2 or per_video.shape[0] == 0:
        raise ValueError("need a non-empty (videos, classes) array")
    defined = ~np.isnan(per_video)
    count = defined.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(defined, per_video, 0.0).sum(axis=0) / count
    per_class[count == 0] = np.nan
    mask = np.ones(per_class.size, dtype=bool) if class_mask is None else np.asarray(class_mask, dtype=bool)
    if mask.shape != per_class.shape:
        raise ValueError("class mask length does not match the number of classes")
    selected = per_class[mask & (count > 0)]
    if selected.size == 0:
        raise ValueError("no class has a defined AP")
    return per_class, float(selected.mean())


@dataclass
class TaskResult:
    class_ids: np.ndarray
    per_class_ap: np.ndarray
    mean_ap: float
    mask: np.ndarray
    per_video: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "class_ids": self.class_ids.tolist(),
            "per_class_ap": _nan_to_none(self.per_class_ap),
            "mean_ap": self.mean_ap,
            "mask": self.mask.tolist(),
        }
        if self.per_video is not None:
            out["per_video"] = [_nan_to_none(row) for row in self.per_video]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TaskResult":
        per_video = d.get("per_video")
        return cls(
            np.asarray(d["class_ids"], dtype=np.int64),
            _none_to_nan(d["per_class_ap"]),
            float(d["mean_ap"]),
            np.asarray(d["mask"], dtype=bool),
            None if per_video is None else np.array([_none_to_nan(r) for r in per_video]),
        )


@dataclass
class EvalReport:
    team_id: str
    tasks: dict[str, TaskResult]
    topk: dict[int, float]
    topk_mean: float
    masked: bool
    video_ids: list[str] = field(default_factory=list)

    def mean_ap(self, task: str) -> float:
        return self.tasks[task].mean_ap

    def to_dict(self) -> dict:
        return {
            "team_id": self.team_id,
            "masked": self.masked,
            "video_ids": list(self.video_ids),
            "tasks": {t: r.to_dict() for t, r in self.tasks.items()},
            "topk": {str(k): v for k, v in self.topk.items()},
            "topk_mean": self.topk_mean,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            d["team_id"],
            {t: TaskResult.from_dict(r) for t, r in d["tasks"].items()},
            {int(k): float(v) for k, v in d["topk"].items()},
            float(d["topk_mean"]),
            bool(d["masked"]),
            list(d.get("video_ids", [])),
        )

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _nan_to_none(values):
    return [None if math.isnan(v) else float(v) for v in np.asarray(values, dtype=np.float64).tolist()]


def _none_to_nan(values):
    return np.array([math.nan if v is None else v for v in values], dtype=np.float64)


def _video_task_aps(tax, probs, labels):
    pv = disentangle_probs(tax, probs)
    lv = disentangle_labels(tax, labels)
    out = {t: video_class_ap(pv.scores[t], lv.scores[t]) for t in ("I", "V", "T", "IV", "IT")}
    out["IVT"] = video_class_ap(probs, labels)
    return out


def evaluate_suite(
    run: Run,
    gt: GroundTruth,
    tax: TripletTaxonomy,
    apply_mask: bool = True,
    ks=DEFAULT_KS,
    threads: int = 1,
    keep_per_video: bool = True,
) -> EvalReport:
    """Score one run on all six tasks plus topK accuracy.

    Component views are pooled frame-wise from the triplet scores; class APs
    are computed per video and averaged across videos. With ``apply_mask``
    the null triplets (and pairs built only from them) leave the IVT, IV and
    IT means.
    """
    check_aligned(run, gt)
    if run.num_classes != tax.num_triplets:
        raise ValueError(f"run has {run.num_classes} classes, taxonomy {tax.num_triplets}")
    videos = gt.video_ids

    def one(vid):
        return _video_task_aps(tax, run.videos[vid], gt.videos[vid])

    if threads > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_video = list(pool.map(one, videos))
    else:
        per_video = [one(v) for v in videos]

    tasks = {}
    for task in TASKS:
        stack = np.stack([pv[task] for pv in per_video])
        mask = tax.task_mask(task, apply_mask)
        per_class, mean = aggregate_ap(stack, mask)
        tasks[task] = TaskResult(tax.class_ids(task), per_class, mean, mask, stack if keep_per_video else None)

    topk, topk_mean = topk_accuracy(run, gt, ks)
    return EvalReport(run.team_id, tasks, topk, topk_mean, apply_mask, videos)


def topk_accuracy(run: Run, gt: GroundTruth, ks=DEFAULT_KS) -> tuple[dict[int, float], float]:
    """Share of each frame's ground-truth triplets found among its K top-scored classes.

    Frame ratios are averaged over all frames (of all videos) that have at
    least one positive; score ties are broken by ascending class id.
    """
    check_aligned(run, gt)
    ks = tuple(int(k) for k in ks)
    num_classes = run.num_classes
    if not ks or any(k < 1 or k > num_classes for k in ks):
        raise ValueError(f"every K must lie in [1, {num_classes}]")
    kmax = max(ks)
    sums = dict.fromkeys(ks, 0.0)
    frames = 0
    for vid in gt.video_ids:
        labels = gt.videos[vid].astype(bool)
        keep = labels.any(axis=1)
        if not keep.any():
            continue
        labels = labels[keep]
        scores = run.videos[vid][keep]
        order = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
        hit = np.take_along_axis(labels, order, axis=1)
        cum = np.cumsum(hit, axis=1)
        n_gt = labels.sum(axis=1)
        for k in ks:
            sums[k] += float((cum[:, k - 1] / n_gt).sum())
        frames += labels.shape[0]
    if frames == 0:
        raise ValueError("no frame has a ground-truth triplet")
    acc = {k: sums[k] / frames for k in ks}
    return acc, float(np.mean([acc[k] for k in ks]))


@dataclass(frozen=True)
class LeaderboardStats:
    mean: float
    std: float
    n: int

    def __str__(self):
        return f"{self.mean:.1f}±{self.std:.1f}"


def leaderboard_stats(values, ddof: int = 1) -> LeaderboardStats:
    """Mean and standard deviation of a leaderboard column.

    ``ddof=1`` (sample deviation) is the convention that reproduces the
    published footers; a single value has std 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("empty column")
    std = float(values.std(ddof=ddof)) if values.size > ddof else 0.0
    return LeaderboardStats(float(values.mean()), std, int(values.size))
