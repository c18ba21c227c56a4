import math

import numpy as np
import pytest
from conftest import small_hyper, small_weights
from helpers import adversary_check, objective_check

from sccvfl import engine as en
from sccvfl import masks as mk
from sccvfl import numkit as nk


@pytest.mark.parametrize("mode", ["shared", "party"])
@pytest.mark.parametrize("seed", [0, 1])
def test_full_objective_gradients(mode, seed):
    rep = objective_check(mode, seed)
    assert rep.ok(1e-4), rep


def test_adversary_gradients():
    assert adversary_check(0).ok(1e-4)


def test_scc_loss_values_and_scale():
    a = np.array([[1.0, -1.0], [0.5, 0.5]])
    b = np.array([[0.0, -1.0], [0.5, 1.5]])
    v, g1, g2 = en.scc_loss(a, b)
    assert v == 1.0
    assert np.array_equal(g1, -g2)
    v2, g1s, _ = en.scc_loss(a, b, scale=0.25)
    assert v2 == 4.0 and np.allclose(g1s, 4 * g1)
    assert en.scc_loss(a, a)[0] == 0.0
    assert en.scc_loss(a, b, p=2)[0] == 1.0
    with pytest.raises(ValueError):
        en.scc_loss(a, b, scale=0.0)


def test_total_objective_coefficients():
    w = en.LossWeights(lam_cons_max=2.0, warmup_epochs=10, ramp_epochs=10)
    comps = {"cls": 1.0, "cons": 1.0, "gen": 1.0, "adv": 1.0, "v_id": 0.0, "v_supp": 0.0, "v_leak": 1.0}
    val, coef = en.total_objective(comps, w, 15)
    assert coef["cons"] == 1.0 and coef["v_leak"] == -w.eta_v
    assert math.isclose(val, 1.0 + 1.0 + w.lam_gen + w.lam_adv - w.eta_v)
    with pytest.raises(en.ConfigError):
        en.total_objective({"cls": 1.0}, w, 0, en.method_matrix("scc_vfl"))


def test_lam_cons_schedule():
    w = en.LossWeights(lam_cons_max=1.2, warmup_epochs=40, ramp_epochs=20)
    assert w.lam_cons(39) == 0.0
    assert w.lam_cons(50) == pytest.approx(0.6)
    assert w.lam_cons(80) == 1.2


def test_method_matrix_rules():
    assert set(en.BASELINES) | set(en.ABLATIONS) | {"plain"} == set(en.method_names())
    with pytest.raises(en.ConfigError):
        en.method_matrix("nope")
    with pytest.raises(en.ConfigError):
        en.MethodConfig("bad", use_cons=True)
    with pytest.raises(en.ConfigError):
        en.MethodConfig("bad", use_gen=True, mask_mode="shuffle")


def test_fuse_modes():
    a, b = np.ones((2, 3)), 2 * np.ones((2, 3))
    assert np.array_equal(en.fuse([a, b]), 3 * np.ones((2, 3)))
    assert en.fuse([a, b], "party").shape == (2, 6)
    with pytest.raises(ValueError):
        en.fuse([a, np.ones((3, 3))])


def test_shuffle_mechanism_moves_only_mediators(toy_layout):
    mask = mk.FeatureMask((mk.PartyRoles((0, 3), (1,), ()), mk.PartyRoles((4, 5), (2,), ())))
    mech = en.CFMechanism("shuffle", toy_layout, mask, gamma=0.2)
    X = np.random.default_rng(0).normal(size=(50, 6))
    out = mech.apply(X, np.zeros(50, int), None, np.random.default_rng(1))
    assert np.array_equal(out[:, [0, 3, 4, 5]], X[:, [0, 3, 4, 5]])
    assert not np.array_equal(out[:, [1, 2]], X[:, [1, 2]])


def test_calibration_matches_grid_oracle():
    rng = np.random.default_rng(0)
    logits = 3.0 * rng.normal(size=(200, 2))
    y = (logits[:, 1] - logits[:, 0] + rng.normal(scale=3.0, size=200) > 0).astype(int)
    T = en.calibrate(logits, y)
    grid = np.exp(np.linspace(np.log(0.05), np.log(20), 4001))
    best = grid[np.argmin([en.nll(logits, y, t) for t in grid])]
    assert abs(math.log(T) - math.log(best)) < 5e-3
    assert np.array_equal((logits / T).argmax(1), logits.argmax(1))


def test_comm_counter_arithmetic():
    c = en.CommCounter()
    c.activations(10, [4, 4], passes=2)
    c.gradients(10, [4, 4])
    c.update(100)
    r = c.report()
    assert r["feature_bytes"] == 4 * 10 * 8 * 2
    assert r["aux_bytes"] == 4 * 10 * 8
    assert r["model_bytes"] == 400 and r["steps"] == 1


def test_rng_streams_independent():
    a, b = en.rng_streams(3), en.rng_streams(3)
    assert a["init"].random() == b["init"].random()
    assert en.rng_streams(3)["init"].random() != en.rng_streams(3)["dropout"].random()


def test_training_is_deterministic(toy_splits, toy_layout):
    runs = [en.train(toy_splits, toy_layout, "scc_vfl", small_weights(), small_hyper(), seed=5) for _ in range(2)]
    assert runs[0].history == runs[1].history
    for x, y in zip(runs[0].model.arrays(), runs[1].model.arrays()):
        assert np.array_equal(x, y)


def test_training_runs_every_method(toy_splits, toy_layout):
    for name in en.method_names():
        tm = en.train(toy_splits, toy_layout, name, small_weights(), small_hyper(max_epochs=6), seed=1)
        assert tm.epochs_run <= 6 and tm.temperature > 0
        assert tm.ledger.remaining >= 0
        for roles in tm.mask.parties:
            assert set(roles.P) <= set(roles.M)


def test_plain_equals_supervised(toy_splits, toy_layout):
    hyper = small_hyper(max_epochs=30, patience=4)
    tm = en.train(toy_splits, toy_layout, "plain", small_weights(warmup_epochs=20), hyper, seed=2)
    ref = en.train_supervised(toy_splits, toy_layout, hyper, seed=2)
    for x, y in zip(tm.model.arrays(), ref.arrays()):
        assert np.array_equal(x, y)


def test_refresh_rebuilds_on_mask_change(toy_splits, toy_layout):
    hyper = small_hyper(max_epochs=12, refresh_interval=2, max_refreshes=2, hysteresis_margin=0.0)
    tm = en.train(toy_splits, toy_layout, "scc_vfl", small_weights(), hyper, seed=0)
    assert len(tm.refresh_events) == 2
    assert [e["version"] for e in tm.refresh_events] == [1, 2]
    # one z_s release, then one table per feature for discovery and each refresh
    assert len(tm.ledger.records) == 1 + 6 * 3


def test_snapshot_tensors_roundtrip(tmp_path, toy_splits, toy_layout):
    tm = en.train(toy_splits, toy_layout, "scc_vfl", small_weights(), small_hyper(max_epochs=4), seed=0)
    nk.save_snapshot(tmp_path / "s.bin", tm.tensors())
    back = nk.load_snapshot(tmp_path / "s.bin")
    for k, v in tm.tensors().items():
        assert np.array_equal(back[k], v)
