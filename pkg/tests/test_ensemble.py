import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.base import clone

from tripletbench import GroundTruth, Run
from tripletbench.ensemble import (
    DEEP_VARIANTS,
    AveragingEnsemble,
    DeepEnsemble,
    DeepWeightedEnsemble,
    SoftVotingEnsemble,
    WeightedAveragingEnsemble,
    apply_deep_ensemble,
    combine_average,
    combine_soft_vote,
    combine_weighted_average,
    compute_performance_weights,
    load_model,
    make_ensemble,
    performance_ratio,
    select_models,
    train_deep_ensemble,
)


def stack(n_models=3, n=8, c=4, seed=0):
    return np.random.default_rng(seed).random((n_models, n, c))


class TestAveraging:
    def test_two_models(self):
        X = np.array([[[0.2, 0.8]], [[0.6, 0.4]]])
        np.testing.assert_allclose(AveragingEnsemble().fit(X).predict_proba(X), [[0.4, 0.6]], atol=1e-15)

    def test_weighted(self):
        X = np.array([[[0.2, 0.8]], [[0.6, 0.4]]])
        out = WeightedAveragingEnsemble(weights=[0.75, 0.25]).fit(X).predict_proba(X)
        np.testing.assert_allclose(out, [[0.3, 0.7]], atol=1e-15)

    @pytest.mark.parametrize("weights", [[0.5, 0.6], [1.5, -0.5], [1.0]])
    def test_bad_weights(self, weights):
        with pytest.raises(ValueError):
            WeightedAveragingEnsemble(weights=weights).fit(stack(2))

    def test_weights_from_calibration(self):
        rng = np.random.default_rng(4)
        y = (rng.random((40, 3)) < 0.3).astype(int)
        y[0] = 1
        X = np.stack([np.clip(y * 0.7 + rng.random(y.shape) * 0.3, 0, 1), rng.random(y.shape)])
        est = WeightedAveragingEnsemble().fit(X, y, lengths=[20, 20])
        assert est.weights_.sum() == pytest.approx(1.0)
        assert est.weights_[0] > est.weights_[1]
        assert est.calibration_ap_[0] == 1.0

    def test_shape_checks(self):
        est = AveragingEnsemble().fit(stack(3, c=4))
        with pytest.raises(ValueError):
            est.predict_proba(stack(3, c=5))
        with pytest.raises(ValueError):
            AveragingEnsemble().fit(stack(2) + 1.0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (4, 5, 3), elements=st.floats(0, 1)))
    def test_output_bounded_by_models(self, X):
        for est in (AveragingEnsemble(), WeightedAveragingEnsemble([0.1, 0.2, 0.3, 0.4]), SoftVotingEnsemble()):
            out = est.fit(X).predict_proba(X)
            assert (out >= X.min(axis=0) - 1e-15).all() and (out <= X.max(axis=0) + 1e-15).all()


class TestSoftVote:
    def test_majority_and_minority(self):
        X = np.array([[[0.9, 0.2]], [[0.7, 0.6]], [[0.3, 0.1]]])
        np.testing.assert_array_equal(SoftVotingEnsemble().fit(X).predict_proba(X), [[0.9, 0.1]])

    def test_even_split_goes_to_min(self):
        X = np.array([[[0.9]], [[0.1]]])
        assert SoftVotingEnsemble().fit(X).predict_proba(X)[0, 0] == 0.1

    def test_threshold_inclusive(self):
        X = np.array([[[0.5]], [[0.5]], [[0.2]]])
        assert SoftVotingEnsemble(0.5).fit(X).predict_proba(X)[0, 0] == 0.5


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (7, 3), elements=st.floats(0, 1)), st.integers(1, 6))
def test_identical_models_return_input(P, n_models):
    X = np.repeat(P[None], n_models, axis=0)
    for est in (
        AveragingEnsemble(),
        WeightedAveragingEnsemble(np.full(n_models, 1.0 / n_models)),
        SoftVotingEnsemble(),
    ):
        np.testing.assert_array_equal(est.fit(X).predict_proba(X), P)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 6, 3), elements=st.floats(0, 1)))
def test_equal_weights_bit_identical_to_average(X):
    avg = AveragingEnsemble().fit(X).predict_proba(X)
    w = WeightedAveragingEnsemble(np.full(5, 0.2)).fit(X).predict_proba(X)
    assert np.array_equal(avg, w)


def test_untrained_softmax_weights_equal_average():
    X = stack(4, 10, 5)
    avg = AveragingEnsemble().fit(X).predict_proba(X)
    for per_class in (False, True):
        est = DeepWeightedEnsemble(per_class=per_class)
        est.fit(X, (X[0] > 0.5).astype(int))
        params = est.init_params(4, 5)
        np.testing.assert_allclose(est._forward(params, X), avg, rtol=0, atol=1e-12)


def _finite_difference(est, X, y, params, step=1e-5):
    out = {}
    for k, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            hi = est._loss_and_grad(params, X, y)[0]
            p[idx] = orig - step
            lo = est._loss_and_grad(params, X, y)[0]
            p[idx] = orig
            g[idx] = (hi - lo) / (2 * step)
        out[k] = g
    return out


@pytest.mark.parametrize("variant", DEEP_VARIANTS)
def test_gradient_matches_finite_differences(variant):
    rng = np.random.default_rng(11)
    X = rng.uniform(0.05, 0.95, (3, 10, 4))
    y = (rng.random((10, 4)) < 0.4).astype(float)
    est = make_ensemble(variant)
    for _ in range(10):
        params = est.init_params(3, 4, rng)
        params = {k: v + rng.normal(0, 0.5, v.shape) for k, v in params.items()}
        _, grads = est._loss_and_grad(params, X, y)
        numeric = _finite_difference(est, X, y, params)
        for k in params:
            denom = np.maximum(np.abs(grads[k]) + np.abs(numeric[k]), 1e-8)
            assert (np.abs(grads[k] - numeric[k]) / denom).max() < 1e-4, (variant, k)


def _planted(seed=0, n=600, c=6):
    rng = np.random.default_rng(seed)
    good = rng.random((n, c))
    y = np.round(good).astype(int)
    X = np.stack([good] + [rng.random((n, c)) for _ in range(4)])
    return X, y


class TestDeepTraining:
    def test_learns_informative_model(self):
        X, y = _planted()
        est = DeepWeightedEnsemble(epochs=20).fit(X, y)
        assert np.argmax(est.weights_) == 0
        assert est.final_loss_ < est.initial_loss_
        assert est.weights_.sum() == pytest.approx(1.0)

    def test_per_class_weights_shape(self):
        X, y = _planted(n=200)
        est = DeepWeightedEnsemble(per_class=True, epochs=5).fit(X, y)
        assert est.weights_.shape == (5, 6)
        np.testing.assert_allclose(est.weights_.sum(axis=0), 1.0)
        assert (np.argmax(est.weights_, axis=0) == 0).all()

    def test_deep_reduces_loss(self):
        X, y = _planted(n=300)
        est = DeepEnsemble(epochs=10).fit(X, y)
        assert est.final_loss_ < est.initial_loss_
        out = est.predict_proba(X)
        assert out.shape == y.shape and ((out >= 0) & (out <= 1)).all()
        assert est.init_params(5, 6, 0)["W1"].shape == (30, 12)

    def test_seeded_training_is_deterministic(self):
        X, y = _planted(n=200)
        a = DeepEnsemble(epochs=3).fit(X, y).predict_proba(X)
        b = DeepEnsemble(epochs=3).fit(X, y).predict_proba(X)
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("variant", DEEP_VARIANTS)
    def test_save_and_load(self, variant, tmp_path):
        X, y = _planted(n=100)
        est = make_ensemble(variant, epochs=2).fit(X, y)
        est.save(tmp_path / "m.json")
        again = load_model(tmp_path / "m.json")
        assert again.variant == variant
        np.testing.assert_array_equal(again.predict_proba(X), est.predict_proba(X))

    def test_clone_keeps_hyperparameters(self):
        est = DeepWeightedEnsemble(per_class=True, epochs=7)
        assert clone(est).get_params() == est.get_params()


class TestRunLevel:
    def runs(self):
        rng = np.random.default_rng(2)
        return [Run(f"t{k}", {"A": rng.random((5, 3)), "B": rng.random((4, 3))}) for k in range(3)]

    def test_combiners_keep_video_layout(self):
        runs = self.runs()
        for out in (combine_average(runs), combine_weighted_average(runs, [0.2, 0.3, 0.5]), combine_soft_vote(runs)):
            assert out.frame_counts() == {"A": 5, "B": 4}
        avg = combine_average(runs)
        np.testing.assert_allclose(avg.videos["B"], np.mean([r.videos["B"] for r in runs], axis=0), atol=1e-15)

    def test_misaligned_runs(self):
        runs = self.runs()
        runs[1].videos["A"] = runs[1].videos["A"][:3]
        with pytest.raises(ValueError):
            combine_average(runs)

    def test_performance_weights(self, small_tax):
        gt = GroundTruth({"A": np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0]])})
        perfect = gt.as_run("p")
        flipped = Run("f", {"A": 1.0 - gt.videos["A"].astype(float)})
        w = compute_performance_weights([perfect, flipped], gt, small_tax)
        assert w.sum() == pytest.approx(1.0) and w[0] > w[1]

    def test_train_and_apply(self):
        X, y = _planted(n=120)
        runs = [Run(f"m{k}", {"V1": X[k, :60], "V2": X[k, 60:]}) for k in range(5)]
        gt = GroundTruth({"V1": y[:60], "V2": y[60:]})
        model = train_deep_ensemble(runs, gt, "deep_weighted", epochs=2)
        out = apply_deep_ensemble(model, runs)
        assert out.team_id == "ensemble-deep_weighted"
        assert out.frame_counts() == {"V1": 60, "V2": 60}
        with pytest.raises(ValueError):
            train_deep_ensemble(runs, gt, "average")


def test_performance_ratio():
    np.testing.assert_allclose(performance_ratio([30.0, 10.0]), [0.75, 0.25])
    with pytest.raises(ValueError):
        performance_ratio([0.0, 0.0])


def test_select_models_strict_threshold():
    assert select_models({"a": 31.0, "b": 30.0, "c": 45.5, "d": 12.0}) == ["c", "a"]


def test_unknown_variant():
    with pytest.raises(ValueError, match="unknown"):
        make_ensemble("stacking")
