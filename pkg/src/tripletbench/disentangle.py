"""Component and pair views of triplet-level scores.

Each instrument, verb, target, instrument-verb and instrument-target class
is scored by max-pooling over the triplets that contain it; on binary
labels this is a logical OR.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .taxonomy import TripletTaxonomy

VIEW_TASKS = ("I", "V", "T", "IV", "IT")


@dataclass(frozen=True, eq=False)
class ComponentViews:
    """Pooled scores per task.

    ``scores[task]`` has the input's leading shape with a trailing axis over
    ``class_ids[task]`` (only classes occurring in the taxonomy).
    """

    scores: dict
    class_ids: dict

    @property
    def I(self):  # noqa: E743
        return self.scores["I"]

    @property
    def V(self):
        return self.scores["V"]

    @property
    def T(self):
        return self.scores["T"]

    @property
    def IV(self):
        return self.scores["IV"]

    @property
    def IT(self):
        return self.scores["IT"]

    def value(self, task: str, class_id: int):
        """Score of component/pair ``class_id`` (an id in the task's own id space)."""
        ids = self.class_ids[task]
        pos = np.searchsorted(ids, class_id)
        if pos >= ids.size or ids[pos] != class_id:
            raise KeyError(f"{task} class {class_id} does not occur in the taxonomy")
        return self.scores[task][..., pos]


def _pool(tax: TripletTaxonomy, y: np.ndarray) -> ComponentViews:
    if y.shape[-1] != tax.num_triplets:
        raise ValueError(f"expected {tax.num_triplets} triplet scores, got {y.shape[-1]}")
    scores, ids = {}, {}
    for task in VIEW_TASKS:
        ids[task] = tax.class_ids(task)
        scores[task] = np.stack([y[..., m].max(axis=-1) for m in tax.members(task)], axis=-1)
    return ComponentViews(scores, ids)


def disentangle_probs(tax: TripletTaxonomy, y) -> ComponentViews:
    """Pool triplet probabilities (a vector or a frames x C matrix) into component views."""
    y = np.asarray(y, dtype=np.float64)
    return _pool(tax, y)


def disentangle_labels(tax: TripletTaxonomy, g) -> ComponentViews:
    g = np.asarray(g)
    if not np.isin(g, (0, 1)).all():
        raise ValueError("labels must be binary")
    return _pool(tax, g.astype(np.int8))
