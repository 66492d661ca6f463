"""Rare-class adjustment of triplet probabilities.

For the least frequent triplets the model's own triplet score is replaced
by one rebuilt from its pooled component scores::

    p(i, v, t) = P_I[i] * (verb_weight * P_V[v] + target_weight * P_T[t])
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_probabilities
from .dataset_io import GroundTruth, Run
from .disentangle import ComponentViews, disentangle_probs
from .taxonomy import TripletTaxonomy

VERB_WEIGHT = 0.03
TARGET_WEIGHT = 0.97
DEFAULT_RARE = 63


@dataclass(frozen=True, eq=False)
class ClassFrequencies:
    counts: np.ndarray
    rare_set: tuple

    def to_dict(self):
        return {"counts": self.counts.tolist(), "rare_set": list(self.rare_set)}

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")


def rare_classes(counts, n_rare) -> tuple:
    """The ``n_rare`` lowest-count class ids, ascending count then id."""
    counts = np.asarray(counts)
    if n_rare < 0 or n_rare > counts.size:
        raise ValueError(f"n_rare must lie in [0, {counts.size}]")
    order = np.lexsort((np.arange(counts.size), counts))
    return tuple(int(t) for t in order[:n_rare])


def class_frequencies(gt: GroundTruth, n_rare=DEFAULT_RARE) -> ClassFrequencies:
    if not gt.videos:
        raise ValueError("empty label corpus")
    counts = sum(m.sum(axis=0, dtype=np.int64) for m in gt.videos.values())
    return ClassFrequencies(np.asarray(counts), rare_classes(counts, n_rare))


def load_frequencies(path, n_rare=None) -> ClassFrequencies:
    """Read a frequency file; ``n_rare`` re-derives the rare set from the counts."""
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    counts = np.asarray(d["counts"], dtype=np.int64)
    if n_rare is None and "rare_set" in d:
        rare = tuple(int(t) for t in d["rare_set"])
    elif n_rare is None:
        rare = rare_classes(counts, min(DEFAULT_RARE, counts.size))
    else:
        rare = rare_classes(counts, n_rare)
    return ClassFrequencies(counts, rare)


def low_frequency_adjust(
    y,
    views: ComponentViews,
    tax: TripletTaxonomy,
    rare: ClassFrequencies,
    verb_weight=VERB_WEIGHT,
    target_weight=TARGET_WEIGHT,
) -> np.ndarray:
    """Rebuild the rare triplets of ``y`` (vector or frames x C) from ``views``.

    Every other entry is returned untouched.
    """
    y = np.asarray(y, dtype=np.float64)
    out = y.copy()
    ids = list(rare.rare_set)
    if not ids:
        return out
    i, v, t = tax.composition[ids].T
    p_i = np.stack([views.value("I", k) for k in i], axis=-1)
    p_v = np.stack([views.value("V", k) for k in v], axis=-1)
    p_t = np.stack([views.value("T", k) for k in t], axis=-1)
    out[..., ids] = p_i * (verb_weight * p_v + target_weight * p_t)
    return out


class LowFrequencyAdjuster(TransformerMixin, BaseEstimator):
    """Learn the rare triplets from training labels, then adjust their scores.

    ``fit`` takes a ``(n_frames, n_triplets)`` label matrix; ``transform``
    takes probabilities of the same width.
    """

    def __init__(self, taxonomy=None, n_rare=DEFAULT_RARE, verb_weight=VERB_WEIGHT, target_weight=TARGET_WEIGHT):
        self.taxonomy = taxonomy
        self.n_rare = n_rare
        self.verb_weight = verb_weight
        self.target_weight = target_weight

    def fit(self, X, y=None):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != self.taxonomy.num_triplets:
            raise ValueError(f"labels must be (n_frames, {self.taxonomy.num_triplets})")
        counts = X.sum(axis=0).astype(np.int64)
        self.frequencies_ = ClassFrequencies(counts, rare_classes(counts, self.n_rare))
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_probabilities(X, ndim=2)
        views = disentangle_probs(self.taxonomy, X)
        return low_frequency_adjust(X, views, self.taxonomy, self.frequencies_, self.verb_weight, self.target_weight)


def adjust_run(run: Run, tax: TripletTaxonomy, freq: ClassFrequencies, verb_weight=VERB_WEIGHT, target_weight=TARGET_WEIGHT) -> Run:
    adjusted = {}
    for vid, probs in run.videos.items():
        views = disentangle_probs(tax, probs)
        adjusted[vid] = low_frequency_adjust(probs, views, tax, freq, verb_weight, target_weight)
    return Run(run.team_id, adjusted)
