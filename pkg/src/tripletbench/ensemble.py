"""Combiners for the triplet probabilities of several models.

All estimators take predictions stacked as ``X`` of shape
``(n_models, n_samples, n_classes)`` and binary targets ``y`` of shape
``(n_samples, n_classes)``; ``predict_proba`` returns
``(n_samples, n_classes)`` probabilities. The ``combine_*`` and
``*_deep_ensemble`` functions wrap them for :class:`~tripletbench.dataset_io.Run`
objects.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_fitted_dims, check_labels, check_stack, stack_labels, stack_runs, unstack
from .dataset_io import GroundTruth, Run
from .metrics import aggregate_ap, video_class_ap
from .taxonomy import TripletTaxonomy

VARIANTS = (
    "average",
    "weighted_average",
    "soft_vote",
    "deep",
    "deep_weighted",
    "deep_per_class_weighted",
)
DEEP_VARIANTS = VARIANTS[3:]

# probabilities are clipped this far from {0, 1} inside the loss
_EPS = 1e-7


class DivergenceError(FloatingPointError):
    def __init__(self, epoch, loss):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


def convex_combination(X, weights) -> np.ndarray:
    """``sum_m w_m X[m]`` for weights summing to one, per model or per (model, class).

    Written as ``X[0] + sum_m w_m (X[m] - X[0])`` so identical models
    reproduce their input exactly.
    """
    weights = np.asarray(weights, dtype=np.float64)
    w = weights[:, None, None] if weights.ndim == 1 else weights[:, None, :]
    out = X[0] + (w * (X - X[0])).sum(axis=0)
    return np.clip(out, 0.0, 1.0)


def _softmax(raw, axis=0):
    z = raw - raw.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class AveragingEnsemble(BaseEstimator):
    """Element-wise mean of the model probabilities."""

    def fit(self, X, y=None):
        X = check_stack(X)
        self.n_models_, _, self.n_classes_ = X.shape
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_stack(X)
        check_fitted_dims(self, X)
        return convex_combination(X, np.full(X.shape[0], 1.0 / X.shape[0]))


class WeightedAveragingEnsemble(BaseEstimator):
    """Weighted mean with per-model weights.

    With ``weights=None``, :meth:`fit` sets each model's weight to its share
    of the summed mean triplet AP on the calibration data (``lengths`` splits
    the samples into videos; ``class_mask`` selects the ranked classes).
    """

    def __init__(self, weights=None):
        self.weights = weights

    def fit(self, X, y=None, lengths=None, class_mask=None):
        X = check_stack(X)
        self.n_models_, _, self.n_classes_ = X.shape
        if self.weights is not None:
            w = _check_weights(self.weights, self.n_models_)
        else:
            if y is None:
                raise ValueError("y is required to derive performance weights")
            y = check_labels(y, X.shape[1:])
            scores = [_mean_ap(X[m], y, lengths, class_mask) for m in range(self.n_models_)]
            self.calibration_ap_ = np.array(scores)
            w = performance_ratio(scores)
        self.weights_ = w
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_stack(X)
        check_fitted_dims(self, X)
        return convex_combination(X, self.weights_)


class SoftVotingEnsemble(BaseEstimator):
    """Max over models where a strict majority scores at least ``threshold``, else min."""

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_stack(X)
        self.n_models_, _, self.n_classes_ = X.shape
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_stack(X)
        check_fitted_dims(self, X)
        votes = (X >= self.threshold).sum(axis=0)
        return np.where(2 * votes > X.shape[0], X.max(axis=0), X.min(axis=0))


def _check_weights(w, n_models):
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n_models,):
        raise ValueError(f"expected {n_models} weights, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    if not math.isclose(w.sum(), 1.0, rel_tol=0, abs_tol=1e-9):
        raise ValueError(f"weights must sum to 1, got {w.sum()}")
    return w


def _mean_ap(scores, labels, lengths, class_mask):
    lengths = [scores.shape[0]] if lengths is None else list(lengths)
    bounds = np.cumsum([0, *lengths])
    if bounds[-1] != scores.shape[0]:
        raise ValueError("video lengths do not add up to the number of samples")
    per_video = [video_class_ap(scores[a:b], labels[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return aggregate_ap(per_video, class_mask)[1]


def performance_ratio(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores")
    if (scores < 0).any():
        raise ValueError("scores must be non-negative")
    total = scores.sum()
    if total <= 0:
        raise ValueError("all calibration scores are zero")
    return scores / total


class _GradientEnsemble(BaseEstimator):
    """Shared mini-batch Adam loop minimising mean binary cross-entropy."""

    variant = None

    def __init__(self, learning_rate=1e-3, epochs=50, batch_size=256, random_state=42):
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.random_state = random_state

    # subclasses define: init_params, _forward, _loss_and_grad

    def loss(self, X, y, params=None):
        return self.loss_and_gradient(X, y, params)[0]

    def loss_and_gradient(self, X, y, params=None):
        """Mean BCE and its gradient with respect to every parameter array."""
        params = self.params_ if params is None else params
        X = check_stack(X)
        y = check_labels(y, X.shape[1:])
        return self._loss_and_grad(params, X, y)

    def fit(self, X, y):
        X = check_stack(X)
        y = check_labels(y, X.shape[1:])
        self.n_models_, n_samples, self.n_classes_ = X.shape
        rng = np.random.default_rng(self.random_state)
        params = self.init_params(self.n_models_, self.n_classes_, rng)

        b1, b2, eps = 0.9, 0.999, 1e-8
        m = {k: np.zeros_like(v) for k, v in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        step = 0
        initial = self._loss_and_grad(params, X, y)[0]
        history = [initial]
        for epoch in range(self.epochs):
            order = rng.permutation(n_samples)
            for start in range(0, n_samples, self.batch_size):
                idx = order[start:start + self.batch_size]
                batch_loss, grads = self._loss_and_grad(params, X[:, idx], y[idx])
                if not np.isfinite(batch_loss):
                    raise DivergenceError(epoch, batch_loss)
                step += 1
                for k in params:
                    m[k] = b1 * m[k] + (1 - b1) * grads[k]
                    v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
                    m_hat = m[k] / (1 - b1 ** step)
                    v_hat = v[k] / (1 - b2 ** step)
                    params[k] = params[k] - self.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            epoch_loss = self._loss_and_grad(params, X, y)[0]
            if not np.isfinite(epoch_loss):
                raise DivergenceError(epoch, epoch_loss)
            history.append(epoch_loss)

        self.params_ = params
        self.initial_loss_ = float(initial)
        self.final_loss_ = float(history[-1])
        self.loss_history_ = [float(h) for h in history]
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        X = check_stack(X)
        check_fitted_dims(self, X)
        return self._forward(self.params_, X)

    # persistence

    def to_dict(self) -> dict:
        check_is_fitted(self)
        return {
            "variant": self.variant,
            "n_models": self.n_models_,
            "n_classes": self.n_classes_,
            "hyper": self.get_params(),
            "seed": self.random_state,
            "params": {k: {"shape": list(p.shape), "data": p.ravel().tolist()} for k, p in self.params_.items()},
            "initial_loss": self.initial_loss_,
            "final_loss": self.final_loss_,
            "loss_history": self.loss_history_,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


class DeepWeightedEnsemble(_GradientEnsemble):
    """Learned convex combination of the models.

    Raw weights (one per model, or one per model and class when
    ``per_class=True``) pass through a softmax over models, so outputs stay
    valid probabilities. Raw weights start at zero, i.e. at the plain mean.
    """

    def __init__(self, per_class=False, learning_rate=1e-3, epochs=50, batch_size=256, random_state=42):
        super().__init__(learning_rate, epochs, batch_size, random_state)
        self.per_class = per_class

    @property
    def variant(self):
        return "deep_per_class_weighted" if self.per_class else "deep_weighted"

    def init_params(self, n_models, n_classes, rng=None):
        shape = (n_models, n_classes) if self.per_class else (n_models,)
        return {"w": np.zeros(shape)}

    @property
    def weights_(self):
        check_is_fitted(self)
        return _softmax(self.params_["w"], axis=0)

    def _forward(self, params, X):
        return convex_combination(X, _softmax(params["w"], axis=0))

    def _loss_and_grad(self, params, X, y):
        raw = params["w"]
        a = _softmax(raw, axis=0)
        w = a[:, None, None] if raw.ndim == 1 else a[:, None, :]
        p = (w * X).sum(axis=0)
        inside = (p > _EPS) & (p < 1 - _EPS)
        pc = np.clip(p, _EPS, 1 - _EPS)
        count = y.size
        loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
        dp = np.where(inside, (pc - y) / (pc * (1 - pc)), 0.0) / count
        da = (dp[None] * X).sum(axis=1)  # (n_models, n_classes)
        if raw.ndim == 1:
            da = da.sum(axis=1)
        dw = a * (da - (a * da).sum(axis=0, keepdims=True))
        return float(loss), {"w": dw}


class DeepEnsemble(_GradientEnsemble):
    """Two-layer network over the concatenated model outputs of one frame.

    ReLU hidden layer of ``hidden_size`` units (default ``2 * n_classes``)
    and a sigmoid output per class.
    """

    variant = "deep"

    def __init__(self, hidden_size=None, learning_rate=1e-3, epochs=50, batch_size=256, random_state=42):
        super().__init__(learning_rate, epochs, batch_size, random_state)
        self.hidden_size = hidden_size

    def init_params(self, n_models, n_classes, rng=None):
        rng = np.random.default_rng(rng)
        n_in = n_models * n_classes
        hidden = self.hidden_size or 2 * n_classes
        return {
            "W1": rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, hidden)),
            "b1": np.zeros(hidden),
            "W2": rng.normal(0.0, math.sqrt(1.0 / hidden), (hidden, n_classes)),
            "b2": np.zeros(n_classes),
        }

    @staticmethod
    def _inputs(X):
        # (n_models, n, C) -> (n, n_models * C), model-major per frame
        return X.transpose(1, 0, 2).reshape(X.shape[1], -1)

    def _forward(self, params, X):
        h = np.maximum(self._inputs(X) @ params["W1"] + params["b1"], 0.0)
        z = h @ params["W2"] + params["b2"]
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def _loss_and_grad(self, params, X, y):
        x = self._inputs(X)
        pre = x @ params["W1"] + params["b1"]
        h = np.maximum(pre, 0.0)
        z = h @ params["W2"] + params["b2"]
        # BCE from logits: softplus(z) - y z
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        dz = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / y.size
        dh = dz @ params["W2"].T
        dpre = dh * (pre > 0)
        grads = {
            "W2": h.T @ dz,
            "b2": dz.sum(axis=0),
            "W1": x.T @ dpre,
            "b1": dpre.sum(axis=0),
        }
        return float(loss), grads


def make_ensemble(variant: str, **hyper):
    """Estimator for ``variant`` (one of :data:`VARIANTS`)."""
    if variant == "average":
        return AveragingEnsemble()
    if variant == "weighted_average":
        return WeightedAveragingEnsemble(**hyper)
    if variant == "soft_vote":
        return SoftVotingEnsemble(**hyper)
    if variant == "deep":
        return DeepEnsemble(**hyper)
    if variant == "deep_weighted":
        return DeepWeightedEnsemble(per_class=False, **hyper)
    if variant == "deep_per_class_weighted":
        return DeepWeightedEnsemble(per_class=True, **hyper)
    raise ValueError(f"unknown ensemble variant {variant!r}; expected one of {VARIANTS}")


def load_model(path):
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(d)


def model_from_dict(d: dict):
    variant = d["variant"]
    if variant not in DEEP_VARIANTS:
        raise ValueError(f"{variant!r} is not a trainable variant")
    hyper = dict(d["hyper"])
    hyper.pop("per_class", None)
    est = make_ensemble(variant, **hyper)
    est.n_models_ = int(d["n_models"])
    est.n_classes_ = int(d["n_classes"])
    est.params_ = {k: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"]) for k, p in d["params"].items()}
    expected = est.init_params(est.n_models_, est.n_classes_, 0)
    for k, p in expected.items():
        if k not in est.params_ or est.params_[k].shape != p.shape:
            raise ValueError(f"parameter {k!r} missing or misshapen for {variant}")
    est.initial_loss_ = float(d.get("initial_loss", math.nan))
    est.final_loss_ = float(d.get("final_loss", math.nan))
    est.loss_history_ = list(d.get("loss_history", []))
    return est


# ------------------------------------------------------------- Run wrappers

def combine_average(runs, team_id="ensemble-average") -> Run:
    X, vids, lengths = stack_runs(runs)
    return unstack(AveragingEnsemble().fit(X).predict_proba(X), vids, lengths, team_id)


def combine_weighted_average(runs, weights, team_id="ensemble-weighted_average") -> Run:
    X, vids, lengths = stack_runs(runs)
    est = WeightedAveragingEnsemble(weights=weights).fit(X)
    return unstack(est.predict_proba(X), vids, lengths, team_id)


def combine_soft_vote(runs, threshold=0.5, team_id="ensemble-soft_vote") -> Run:
    X, vids, lengths = stack_runs(runs)
    return unstack(SoftVotingEnsemble(threshold).fit(X).predict_proba(X), vids, lengths, team_id)


def compute_performance_weights(runs, gt_calibration: GroundTruth, tax: TripletTaxonomy, apply_mask=True) -> np.ndarray:
    """Each run's share of the summed mean triplet AP on calibration data."""
    X, vids, lengths = stack_runs(runs)
    y = stack_labels(gt_calibration, vids)
    if y.shape != X.shape[1:]:
        raise ValueError("calibration labels do not match the runs")
    mask = tax.task_mask("IVT", apply_mask)
    return performance_ratio([_mean_ap(X[m], y, lengths, mask) for m in range(X.shape[0])])


def select_models(scores: dict, threshold=30.0) -> list:
    """Team ids whose score (AP in percent) is above ``threshold``, best first."""
    keep = [(t, s) for t, s in scores.items() if s > threshold]
    return [t for t, _ in sorted(keep, key=lambda ts: (-ts[1], ts[0]))]


def train_deep_ensemble(runs_train, gt_train: GroundTruth, variant="deep_weighted", **hyper):
    if variant not in DEEP_VARIANTS:
        raise ValueError(f"{variant!r} is not trainable; expected one of {DEEP_VARIANTS}")
    X, vids, _ = stack_runs(runs_train)
    y = stack_labels(gt_train, vids)
    return make_ensemble(variant, **hyper).fit(X, y)


def apply_deep_ensemble(model, runs, team_id=None) -> Run:
    X, vids, lengths = stack_runs(runs)
    return unstack(model.predict_proba(X), vids, lengths, team_id or f"ensemble-{model.variant}")
