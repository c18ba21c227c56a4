import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sccvfl import numkit as nk


def _rand_mlp(sizes, seed, acts=None):
    rng = np.random.default_rng(seed)
    net = nk.DenseParams.init(sizes, rng, acts)
    for b in net.biases:
        b[:] = rng.normal(scale=0.5, size=b.shape)
    return net


def test_dense_shapes_checked():
    rng = np.random.default_rng(0)
    with pytest.raises(nk.ShapeError):
        nk.DenseParams([rng.normal(size=(3, 4)), rng.normal(size=(5, 2))],
                       [np.zeros(4), np.zeros(2)], ["relu", "linear"], [0.0, 0.0])
    with pytest.raises(ValueError):
        nk.DenseParams([rng.normal(size=(3, 4))], [np.zeros(4)], ["tanh"], [0.0])


def test_forward_matches_manual_two_layer():
    net = _rand_mlp([3, 5, 2], 1)
    X = np.random.default_rng(2).normal(size=(7, 3))
    out, _ = nk.mlp_forward(net, X)
    manual = np.maximum(X @ net.weights[0] + net.biases[0], 0) @ net.weights[1] + net.biases[1]
    assert np.allclose(out, manual)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mlp_backward_finite_differences(seed):
    net = _rand_mlp([4, 6, 6, 3], seed)
    rng = np.random.default_rng(seed + 10)
    X = rng.normal(size=(20, 4))
    y = rng.integers(0, 3, 20)

    def loss():
        return nk.softmax_xent(nk.mlp_forward(net, X)[0], y)[0]

    logits, cache = nk.mlp_forward(net, X)
    _, g = nk.softmax_xent(logits, y)
    grads, gx = nk.mlp_backward(net, cache, g)
    rep = nk.finite_diff_check(loss, net.arrays(), grads)
    assert rep.ok(1e-4), rep
    rep_x = nk.finite_diff_check(loss, [X], [gx])
    assert rep_x.ok(1e-4)


def test_dropout_replay_backward():
    net = _rand_mlp([3, 8, 2], 4)
    net.dropout = [0.3, 0.0]
    rng = np.random.default_rng(5)
    X = rng.normal(size=(20, 3))
    y = rng.integers(0, 2, 20)
    masks = nk.dropout_masks(net, 20, rng)

    def loss():
        return nk.softmax_xent(nk.mlp_forward(net, X, True, masks=masks)[0], y)[0]

    logits, cache = nk.mlp_forward(net, X, True, masks=masks)
    grads, _ = nk.mlp_backward(net, cache, nk.softmax_xent(logits, y)[1])
    assert nk.finite_diff_check(loss, net.arrays(), grads).ok()


def test_stale_cache_refused():
    net = _rand_mlp([2, 3, 2], 0)
    _, cache = nk.mlp_forward(net, np.ones((1, 2)))
    nk.bump(net)
    with pytest.raises(nk.StaleCacheError):
        nk.mlp_backward(net, cache, np.ones((1, 2)))


def test_fd_oracle_flags_wrong_gradient():
    w = np.array([1.0, -2.0, 0.5])
    rep = nk.finite_diff_check(lambda: float((w ** 2).sum()), [w], [w.copy()])
    assert rep.max_rel_error > 0.4


def test_grl_negates_and_scales():
    g = np.array([[1.0, -2.0]])
    assert np.array_equal(nk.grl(g, 0.5), np.array([[-0.5, 1.0]]))
    with pytest.raises(ValueError):
        nk.grl(g, -1.0)


@given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_xent_gradient_rows_sum_to_zero(n, k, seed):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=(n, k))
    y = rng.integers(0, k, n)
    loss, g = nk.softmax_xent(logits, y)
    assert loss >= 0
    assert np.allclose(g.sum(1), 0.0, atol=1e-12)


def test_adam_first_step_is_lr_sign():
    p = [np.array([1.0, -1.0, 3.0])]
    opt = nk.OptState.for_params(p, lr=0.1)
    nk.opt_step(opt, p, [np.array([2.0, -0.5, 0.0])])
    # bias-corrected first step moves by lr * sign(g) (zero gradient stays put)
    assert np.allclose(p[0], [0.9, -0.9, 3.0], atol=1e-6)


def test_adamw_decoupled_decay():
    p = [np.array([2.0])]
    opt = nk.OptState.for_params(p, lr=0.1, variant="adamw", weight_decay=0.5)
    nk.opt_step(opt, p, [np.array([0.0])])
    assert np.allclose(p[0], [2.0 - 0.1 * 0.5 * 2.0])


def test_hsic_independent_near_zero_and_dependent_positive():
    rng = np.random.default_rng(0)
    x = rng.normal(size=200)
    Kx = nk.rbf_gram(x)
    assert nk.hsic(Kx, nk.rbf_gram(rng.normal(size=200))) < 5e-3
    assert nk.hsic(Kx, nk.rbf_gram(x ** 2 + 0.01 * rng.normal(size=200))) > 2e-2


def test_mmd_unbiased_vs_biased_and_grad():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(20, 2))
    Y = rng.normal(loc=1.0, size=(25, 2))
    bw = nk.median_bandwidth(X, Y)
    assert nk.mmd2(X, Y, biased=True, bandwidth=bw) > nk.mmd2(X, X[::-1], biased=True, bandwidth=bw)
    val, grad = nk.mmd2_biased_grad(X, Y, bw)
    assert np.isclose(val, nk.mmd2(X, Y, biased=True, bandwidth=bw))
    rep = nk.finite_diff_check(lambda: nk.mmd2_biased_grad(X, Y, bw)[0], [X], [grad])
    assert rep.ok()


def test_snapshot_roundtrip(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5]), "empty": np.zeros(0)}
    nk.save_snapshot(tmp_path / "s.bin", t)
    back = nk.load_snapshot(tmp_path / "s.bin")
    assert list(back) == list(t)
    for k in t:
        assert np.array_equal(back[k], t[k])
    (tmp_path / "bad.bin").write_bytes(b"notasnapshot")
    with pytest.raises(ValueError):
        nk.load_snapshot(tmp_path / "bad.bin")


def test_fd_oracle_perturbs_fortran_arrays_in_place():
    A = np.asfortranarray(np.random.default_rng(0).normal(size=(4, 3)))
    rep = nk.finite_diff_check(lambda: float((A ** 3).sum()), [A], [3 * A ** 2])
    assert rep.ok()
