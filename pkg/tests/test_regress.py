import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from npdag.data import Dataset, philox, split_half
from npdag.oracle import AncestralQuadratureOracle
from npdag.regress import (
    FittedRegressor,
    KnnRegressor,
    RegressionError,
    RegressorSpec,
    bandwidths,
    fit,
    marginal_variance,
    plugin_value,
    predict,
    residual_variance_plugin,
)
from npdag.simulate import named_model, simulate_dataset

KINDS = ["kernel_smoother", "knn", "additive_backfit"]


class ZeroRegressor(FittedRegressor):
    """Predicts 0 everywhere; the training range is widened to contain it."""

    kind = "zero"

    def __init__(self, p):
        super().__init__(p, np.array([-1.0, 1.0]))

    def _raw_predict(self, Xq):
        return np.zeros(Xq.shape[0])


@pytest.mark.parametrize("kind", KINDS)
def test_constant_response(kind):
    X = np.random.default_rng(0).normal(size=(50, 2))
    fr = fit(RegressorSpec(kind), X, np.full(50, 0.7))
    np.testing.assert_allclose(fr.predict(np.random.default_rng(1).normal(size=(20, 2))), 0.7)


def test_identity_kernel_fit():
    rng = np.random.default_rng(2)
    x = rng.uniform(0, 1, 1000)
    fr = fit(RegressorSpec(), x[:, None], x)
    grid = np.linspace(0.05, 0.95, 200)
    assert np.mean((fr.predict(grid[:, None]) - grid) ** 2) <= 0.01


def test_knn_with_k_equal_n_is_mean():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(30, 2)), rng.normal(size=30)
    fr = fit(RegressorSpec("knn", k=30), X, y)
    np.testing.assert_allclose(fr.predict(rng.normal(size=(5, 2))), y.mean())


def test_knn_auto_k_and_ties():
    X = np.zeros((16, 1))
    fr = fit(RegressorSpec("knn"), X, np.arange(16.0))
    assert fr.k == math.ceil(16 ** (2 / 3))
    # all distances tie: the lowest training rows win
    assert fr.predict([[0.0]])[0] == np.mean(np.arange(fr.k))
    assert isinstance(fr, KnnRegressor)


def test_tiny_bandwidth_interpolates():
    rng = np.random.default_rng(4)
    X, y = rng.uniform(0, 10, size=(40, 1)), rng.normal(size=40)
    fr = fit(RegressorSpec(bandwidth_scale=1e-4), X, y)
    np.testing.assert_allclose(fr.predict(X[:5]), y[:5], atol=1e-6)


def test_far_query_falls_back_to_mean():
    rng = np.random.default_rng(5)
    X, y = rng.normal(size=(40, 1)), rng.normal(size=40)
    for kind in ("kernel_smoother", "additive_backfit"):
        fr = fit(RegressorSpec(kind), X, y)
        assert fr.predict([[1e6]])[0] == pytest.approx(y.mean())


@pytest.mark.parametrize("kind", KINDS)
def test_batch_equals_loop(kind):
    rng = np.random.default_rng(6)
    X, y = rng.normal(size=(60, 2)), rng.normal(size=60)
    fr = fit(RegressorSpec(kind), X, y)
    Q = rng.normal(size=(25, 2))
    batch = predict(fr, Q)
    single = np.array([fr.predict(q[None, :])[0] for q in Q])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-12)


def test_chunking_does_not_change_predictions(monkeypatch):
    import npdag.regress as rg

    rng = np.random.default_rng(7)
    X, y = rng.normal(size=(300, 3)), rng.normal(size=300)
    Q = rng.normal(size=(200, 3))
    full = fit(RegressorSpec(), X, y).predict(Q)
    monkeypatch.setattr(rg, "_CHUNK_CELLS", 301)
    np.testing.assert_allclose(fit(RegressorSpec(), X, y).predict(Q), full, rtol=0, atol=1e-13)


def test_zero_variance_column_bandwidth():
    X = np.column_stack([np.ones(20), np.arange(20.0)])
    h = bandwidths(X, 1.0)
    assert h[0] == 1.0 and h[1] > 0


def test_fit_errors():
    with pytest.raises(RegressionError):
        fit(RegressorSpec(), np.zeros((1, 1)), np.zeros(1))
    with pytest.raises(RegressionError):
        fit(RegressorSpec(), np.zeros((3, 1)), np.zeros(2))
    with pytest.raises(RegressionError):
        fit(RegressorSpec(), np.array([[0.0], [np.inf]]), np.zeros(2))
    fr = fit(RegressorSpec(), np.random.default_rng(0).normal(size=(5, 2)), np.arange(5.0))
    with pytest.raises(RegressionError):
        fr.predict(np.zeros((2, 3)))


def test_spec_validation_and_round_trip():
    for bad in ({"kind": "gam"}, {"bandwidth_scale": 0}, {"k": 0}, {"max_sweeps": 0}):
        with pytest.raises(ValueError):
            RegressorSpec(**bad)
    spec = RegressorSpec("knn", 2.0, 7, 5, 1e-4)
    as_text = {k: str(v) for k, v in spec.to_dict().items()}
    assert RegressorSpec.from_dict(as_text) == spec


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(KINDS),
       hnp.arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 3)),
                  elements=st.floats(-100, 100)),
       st.integers(0, 2**31 - 1),
       st.floats(0.01, 10))
def test_predictions_within_training_range(kind, X, seed, scale):
    rng = np.random.default_rng(seed)
    y = rng.normal(size=X.shape[0]) * 5
    fr = fit(RegressorSpec(kind, bandwidth_scale=scale), X, y)
    Q = np.vstack([X, rng.normal(scale=200, size=(10, X.shape[1]))])
    out = fr.predict(Q)
    assert np.all(np.isfinite(out))
    assert np.all(out >= y.min()) and np.all(out <= y.max())


def _pair(x, y):
    return Dataset.from_array(np.column_stack([x, y]))


def test_copy_column_gives_near_zero():
    x = philox(11).normal(size=2000)
    sp = split_half(_pair(x, x), 0)
    est = residual_variance_plugin(RegressorSpec(), sp.first, sp.second, 1, [0])
    assert abs(est.value) <= 0.05
    assert est.reported >= 0


def test_independent_uniform_target():
    rng = philox(12)
    x, y = rng.normal(size=4000), rng.uniform(size=4000)
    sp = split_half(_pair(x, y), 1)
    est = residual_variance_plugin(RegressorSpec(), sp.first, sp.second, 1, [0])
    fr = fit(RegressorSpec(), sp.first.columns([0]), sp.first.column(1))
    terms = sp.second.column(1) ** 2 - fr.predict(sp.second.columns([0])) ** 2
    se = terms.std(ddof=1) / math.sqrt(terms.size)
    assert abs(est.value - 1 / 12) <= 3 * se


def test_quadratic_chain_second_node():
    model = named_model("exampleB1", sigma3=0.5)
    ds = simulate_dataset(model, 100_000, 5)
    sp = split_half(ds, 0)
    fr = fit(RegressorSpec(), sp.first.columns([0]), sp.first.column(1))
    y, fx = sp.second.column(1), fr.predict(sp.second.columns([0]))
    terms = y**2 - fx**2
    se = terms.std(ddof=1) / math.sqrt(terms.size)
    # the uncentered plug-in is exactly the mean of these terms
    assert abs(terms.mean() - 2 / 3) <= 3 * se


def test_plugin_errors():
    ds = Dataset.from_array(np.random.default_rng(0).normal(size=(10, 2)))
    with pytest.raises(RegressionError):
        residual_variance_plugin(RegressorSpec(), ds, ds, 1, [])
    with pytest.raises(RegressionError):
        residual_variance_plugin(RegressorSpec(), ds, ds, 1, [1])


def test_uncentered_identity_with_zero_predictor():
    rng = np.random.default_rng(13)
    X, y = rng.normal(size=(37, 2)), rng.normal(size=37)
    assert plugin_value(ZeroRegressor(2), X, y) == float(np.mean(y**2))
    assert plugin_value(ZeroRegressor(2), X, y, centered=True) == float(np.mean(y**2))


def test_centered_option_differs():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(200, 1))
    y = X[:, 0] + rng.normal(size=200)
    fr = fit(RegressorSpec(), X, y)
    fx = fr.predict(X)
    assert plugin_value(fr, X, y, centered=True) == pytest.approx(np.mean((y - fx) ** 2))
    assert plugin_value(fr, X, y) == pytest.approx(np.mean(y**2) - np.mean(fx**2))


def test_marginal_variance_cases():
    assert marginal_variance(Dataset.from_array(np.full((5, 1), 3.0)), 0) == 0.0
    assert marginal_variance(Dataset.from_array([[0.0], [1.0]]), 0) == 0.5
    x = philox(15).normal(size=100_000)
    se = math.sqrt(2 / (x.size - 1))
    assert abs(marginal_variance(Dataset.from_array(x[:, None]), 0) - 1) <= 3 * se
    with pytest.raises(RegressionError):
        marginal_variance(Dataset.from_array([[1.0]]), 0)


def test_consistency_drift():
    """Median plug-in error over 20 seeds strictly decreases as n doubles."""
    medians = []
    for n in (500, 1000, 2000, 4000, 8000):
        errs = []
        for s in range(20):
            rng = philox([s, n])
            x = rng.normal(size=n)
            y = np.sin(2 * x) + math.sqrt(0.5) * rng.normal(size=n)
            sp = split_half(_pair(x, y), s)
            est = residual_variance_plugin(RegressorSpec(), sp.first, sp.second, 1, [0])
            errs.append(abs(est.value - 0.5))
        medians.append(float(np.median(errs)))
    assert all(b < a for a, b in zip(medians, medians[1:])), medians


def test_plugin_tracks_oracle_ordering():
    model = named_model("exampleB1", sigma3=0.5)
    oracle = AncestralQuadratureOracle(model)
    sets = [(), (0,), (0, 1)]
    exact = [oracle.query(2, s) for s in sets]
    assert exact[0] > exact[1] > exact[2]
    ds = simulate_dataset(model, 10_000, 9)
    sp = split_half(ds, 2)
    est = [marginal_variance(ds, 2)] + [
        residual_variance_plugin(RegressorSpec(), sp.first, sp.second, 2, s).value
        for s in sets[1:]
    ]
    assert est[0] > est[1] > est[2]
