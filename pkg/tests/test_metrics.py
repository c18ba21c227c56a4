import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccvfl import metrics as mt
from sccvfl import numkit as nk


def linear_grad_fn(W, b):
    def forward(X):
        return X @ W + b, X

    def backward(X, g):
        return None, g @ W.T

    return mt.model_grad_fn(forward, backward)


def test_scg_and_flip_rate():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    b = np.array([[0.0, 0.5], [0.0, 1.0]])
    assert mt.scg(a, b) == pytest.approx(0.75)
    assert mt.scg(a, b, p=2) == pytest.approx(0.625)
    assert mt.flip_rate(a.argmax(1), b.argmax(1)) == 50.0
    assert mt.scg(a, a) == 0.0 and mt.flip_rate(a.argmax(1), a.argmax(1)) == 0.0


def test_group_fairness_oracle():
    pred = np.array([1, 1, 0, 0, 1, 0])
    y = np.array([1, 0, 1, 1, 1, 0])
    s = np.array([0, 0, 0, 1, 1, 1])
    dp, eo, flags = mt.group_fairness(pred, y, s)
    # rates 2/3 vs 1/3; TPR 1/2 vs 1/2; FPR 1 vs 0
    assert dp == pytest.approx(1 / 3) and eo == pytest.approx(1.0) and not flags


def test_aggregate_sample_std():
    rows = [{"a": 1.0}, {"a": 2.0}, {"a": 3.0}]
    assert mt.aggregate(rows)["a"] == pytest.approx((2.0, 1.0))
    with pytest.raises(mt.AggregationError):
        mt.aggregate(rows[:1])
    with pytest.raises(mt.AggregationError):
        mt.aggregate([{"a": 1.0}, {"b": 1.0}])


def test_balanced_split():
    s = np.r_[np.zeros(30, int), np.ones(10, int)]
    tr, te = mt.balanced_split(s, np.random.default_rng(0))
    assert (s[tr] == 0).sum() == (s[tr] == 1).sum() == 5
    assert (s[te] == 0).sum() == (s[te] == 1).sum() == 5
    with pytest.raises(mt.AttackUnavailable):
        mt.balanced_split(np.zeros(10, int), np.random.default_rng(0))


def test_aia_detects_leaky_representation():
    rng = np.random.default_rng(0)
    s = rng.integers(0, 2, 400)
    reps = rng.normal(size=(400, 4))
    reps[:, 0] += 3.0 * s
    sr = mt.aia_attack(reps, s, rng, budgets=(20,))
    assert sr[20] > 85.0


@given(st.integers(0, 10_000), st.floats(0.01, 0.5))
@settings(max_examples=25, deadline=None)
def test_pgd_respects_box_and_support(seed, eps):
    rng = np.random.default_rng(seed)
    net = nk.DenseParams.init([5, 6, 2], rng)
    fn = mt.model_grad_fn(lambda X: nk.mlp_forward(net, X), lambda c, g: nk.mlp_backward(net, c, g))
    X = rng.normal(size=(30, 5))
    S = [1, 3]
    off = [0, 2, 4]

    def check(delta):
        assert np.all(np.abs(delta) <= eps + 1e-15)
        assert np.all(delta[:, off] == 0.0)

    res = mt.subspace_pgd(fn, X, S, eps, steps=10, check=check)
    check(res.delta)


@given(st.integers(0, 10_000), st.sampled_from([0.02, 0.05, 0.1, 0.2]))
@settings(max_examples=25, deadline=None)
def test_pgd_linear_oracle_exact(seed, eps):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 2))
    b = rng.normal(size=2)
    X = rng.normal(scale=0.3, size=(200, 4))
    S = [0, 2]
    res = mt.subspace_pgd(linear_grad_fn(W, b), X, S, eps, steps=20)
    assert np.array_equal(res.flipped, mt.linear_flip_oracle(W, b, X, S, eps))


def test_pgd_curve_nondecreasing():
    rng = np.random.default_rng(0)
    net = nk.DenseParams.init([4, 16, 2], rng)
    fn = mt.model_grad_fn(lambda X: nk.mlp_forward(net, X), lambda c, g: nk.mlp_backward(net, c, g))
    X = rng.normal(size=(300, 4))
    curve = mt.pgd_curve(fn, X, [0, 1], (0.02, 0.05, 0.10, 0.20))
    vals = [curve[e] for e in sorted(curve)]
    assert vals == sorted(vals)


def test_pgd_empty_subspace():
    fn = linear_grad_fn(np.eye(2), np.zeros(2))
    res = mt.subspace_pgd(fn, np.ones((3, 2)), [], 0.1)
    assert res.sr == 0.0 and "empty subspace" in res.flags


def test_metrics_record_guards():
    with pytest.raises(ValueError):
        mt.MetricsRecord(1.2, 0.1, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        mt.MetricsRecord(0.5, 0.1, 0.0, 120.0, 0.0, 0.0)
