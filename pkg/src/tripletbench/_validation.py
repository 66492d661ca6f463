"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .dataset_io import AlignmentError, GroundTruth, Run


def check_probabilities(a, name="X", ndim=None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if ndim is not None and a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-D, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return a


def check_stack(X) -> np.ndarray:
    """Model predictions stacked as ``(n_models, n_samples, n_classes)``."""
    X = check_probabilities(X, "X", ndim=3)
    if X.shape[0] == 0:
        raise ValueError("need at least one model")
    return X


def check_labels(y, shape) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"y has shape {y.shape}, expected {tuple(shape)}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("y must be binary")
    return y.astype(np.float64)


def check_fitted_dims(est, X):
    if X.shape[0] != est.n_models_:
        raise ValueError(f"fitted for {est.n_models_} models, got {X.shape[0]}")
    if X.shape[2] != est.n_classes_:
        raise ValueError(f"fitted for {est.n_classes_} classes, got {X.shape[2]}")


def stack_runs(runs) -> tuple[np.ndarray, list[str], list[int]]:
    """Stack aligned runs into ``(n_models, total_frames, n_classes)``."""
    runs = list(runs)
    if not runs:
        raise ValueError("need at least one run")
    first = runs[0]
    for r in runs[1:]:
        if r.video_ids != first.video_ids:
            raise AlignmentError(f"runs {first.team_id!r} and {r.team_id!r} cover different videos")
        for vid in first.video_ids:
            if r.videos[vid].shape != first.videos[vid].shape:
                raise AlignmentError(f"runs {first.team_id!r} and {r.team_id!r} differ in shape on {vid}")
    lengths = [first.videos[v].shape[0] for v in first.video_ids]
    X = np.stack([r.stacked() for r in runs])
    return X, first.video_ids, lengths


def stack_labels(gt: GroundTruth, video_ids) -> np.ndarray:
    missing = [v for v in video_ids if v not in gt.videos]
    if missing:
        raise AlignmentError(f"ground truth lacks videos {missing}")
    return np.concatenate([gt.videos[v] for v in video_ids], axis=0)


def unstack(pred, video_ids, lengths, team_id) -> Run:
    bounds = np.cumsum([0, *lengths])
    return Run(team_id, {v: pred[bounds[k]:bounds[k + 1]] for k, v in enumerate(video_ids)})
