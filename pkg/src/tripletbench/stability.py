"""Rank stability: clip-level scores compared pairwise with Wilcoxon signed-rank tests."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset_io import GroundTruth, Run, check_aligned
from .metrics import video_class_ap
from .taxonomy import TripletTaxonomy

EXACT_MAX_N = 15
SIGNIFICANCE = 0.05


class NoValidWindowError(ValueError):
    code = "NO_VALID_WINDOW"


@dataclass(frozen=True)
class ClipSample:
    video_id: str
    start_frame: int
    length: int


def sample_batches(gt: GroundTruth, n=30, length=100, seed=0) -> list[ClipSample]:
    """Draw ``n`` windows of ``length`` consecutive frames, uniformly over all valid positions.

    Videos shorter than ``length`` contribute no positions. Draws are with
    replacement.
    """
    videos = [(vid, m.shape[0] - length + 1) for vid, m in gt.videos.items() if m.shape[0] >= length]
    if not videos or length < 1:
        raise NoValidWindowError(f"NO_VALID_WINDOW: no video has {length} frames")
    starts = np.cumsum([0] + [k for _, k in videos])
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, starts[-1], size=n)
    out = []
    for p in picks.tolist():
        k = int(np.searchsorted(starts, p, side="right")) - 1
        out.append(ClipSample(videos[k][0], p - int(starts[k]), length))
    return out


def _ranks(a):
    """Ascending ranks, ties averaged."""
    order = np.argsort(a, kind="stable")
    sorted_a = a[order]
    ranks = np.empty(a.size)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_sided(ranks, w_plus):
    # distribution of the positive-rank sum over all 2^n sign patterns; ranks
    # are multiples of 1/2, so work with doubled (integer) ranks
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    values = np.arange(total + 1)
    centre = total / 2.0
    dev = abs(2 * w_plus - centre)
    extreme = np.abs(values - centre) >= dev - 1e-9
    return float(counts[extreme].sum() / 2.0 ** ranks.size)


def _normal_two_sided(ranks, abs_diffs, w_plus):
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(abs_diffs, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    dev = max(abs(w_plus - mean) - 0.5, 0.0)
    z = dev / math.sqrt(var)
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(diffs, exact_max_n=EXACT_MAX_N) -> float:
    """Two-sided p-value of the Wilcoxon signed-rank test on paired differences.

    Zero differences are dropped and tied magnitudes share averaged ranks.
    The null distribution is enumerated exactly for up to ``exact_max_n``
    non-zero differences; beyond that a normal approximation with
    continuity and tie corrections is used.
    """
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise ValueError("need at least one difference")
    if np.isnan(d).any():
        raise ValueError("NaN difference")
    d = d[d != 0]
    if d.size == 0:
        return 1.0
    abs_d = np.abs(d)
    ranks = _ranks(abs_d)
    w_plus = float(ranks[d > 0].sum())
    if d.size <= exact_max_n:
        return min(1.0, _exact_two_sided(ranks, w_plus))
    return _normal_two_sided(ranks, abs_d, w_plus)


@dataclass
class StabilityMatrix:
    teams: list
    p: np.ndarray
    n_batches: int
    clip_length: int
    seed: int
    clips: list
    scores: np.ndarray  # (n_teams, n_clips) masked mean AP_IVT per clip

    def significant(self, alpha=SIGNIFICANCE) -> np.ndarray:
        return self.p <= alpha

    def to_dict(self) -> dict:
        return {
            "teams": list(self.teams),
            "p": self.p.tolist(),
            "n_batches": self.n_batches,
            "clip_length": self.clip_length,
            "seed": self.seed,
            "clips": [[c.video_id, c.start_frame, c.length] for c in self.clips],
            "clip_scores": [[None if math.isnan(x) else x for x in row] for row in self.scores.tolist()],
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=1, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["team", *self.teams])
        for team, row in zip(self.teams, self.p.tolist()):
            writer.writerow([team, *(repr(x) for x in row)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def clip_score(probs, labels, class_mask) -> float:
    """Masked mean AP over the classes that have positives in the clip (``nan`` if none)."""
    ap = video_class_ap(probs, labels)
    keep = np.asarray(class_mask, dtype=bool) & ~np.isnan(ap)
    return float(ap[keep].mean()) if keep.any() else math.nan


def stability_matrix(team_runs, gt: GroundTruth, tax: TripletTaxonomy, n=30, length=100, seed=0, apply_mask=True) -> StabilityMatrix:
    """Pairwise Wilcoxon p-values between teams over one shared set of clips.

    Clips where no ranked class has a positive frame are dropped from every
    comparison.
    """
    runs = list(team_runs)
    if len(runs) < 2:
        raise ValueError("need at least two teams")
    teams = [r.team_id for r in runs]
    if len(set(teams)) != len(teams):
        raise ValueError("team ids must be unique")
    for r in runs:
        check_aligned(r, gt)
    clips = sample_batches(gt, n, length, seed)
    mask = tax.task_mask("IVT", apply_mask)

    scores = np.empty((len(runs), len(clips)))
    for c, clip in enumerate(clips):
        sl = slice(clip.start_frame, clip.start_frame + clip.length)
        labels = gt.videos[clip.video_id][sl]
        for t, r in enumerate(runs):
            scores[t, c] = clip_score(r.videos[clip.video_id][sl], labels, mask)

    usable = ~np.isnan(scores).any(axis=0)
    p = np.ones((len(runs), len(runs)))
    for a in range(len(runs)):
        for b in range(a + 1, len(runs)):
            diffs = scores[a, usable] - scores[b, usable]
            p[a, b] = p[b, a] = wilcoxon_signed_rank(diffs) if diffs.size else 1.0
    return StabilityMatrix(teams, p, n, length, seed, clips, scores)
