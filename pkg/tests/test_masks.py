import math

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from sccvfl import data
from sccvfl import masks as mk
from sccvfl import numkit as nk
from sccvfl import privacy as pv


def _scores(sizes, seed):
    rng = np.random.default_rng(seed)
    out, start = {}, 0
    for p, d in enumerate(sizes):
        out[p] = (np.arange(start, start + d), rng.random(d))
        start += d
    return out


def _check_partition(mask, scores):
    for p, roles in enumerate(mask.parties):
        cols = set(scores[p][0].tolist())
        assert set(roles.N) | set(roles.M) == cols
        assert not set(roles.N) & set(roles.M)
        assert set(roles.P) <= set(roles.M)


party_sizes = st.lists(st.integers(1, 12), min_size=1, max_size=4)
rho = st.floats(0.05, 1.0)


@given(party_sizes, rho, rho, st.integers(0, 10_000))
@settings(max_examples=80, deadline=None)
def test_tripartition_sizes_and_invariants(sizes, rho_M, rho_P, seed):
    sc = _scores(sizes, seed)
    mask = mk.tripartition(sc, rho_M, rho_P)
    _check_partition(mask, sc)
    for p, roles in enumerate(mask.parties):
        d = sizes[p]
        m = math.ceil(rho_M * d - 1e-9)
        assert len(roles.M) == m
        assert len(roles.P) == math.ceil(rho_P * m - 1e-9)
        # M holds the top scores
        top = set(sc[p][0][mk.rank_order(sc[p][1])[:m]].tolist())
        assert set(roles.M) == top


@given(party_sizes, rho, rho, st.integers(0, 10_000), st.floats(0, 0.5))
@settings(max_examples=60, deadline=None)
def test_refresh_fixed_point_under_same_scores(sizes, rho_M, rho_P, seed, margin):
    sc = _scores(sizes, seed)
    mask = mk.tripartition(sc, rho_M, rho_P)
    policy = mk.RefreshPolicy(hysteresis_margin=margin)
    again = mk.refresh_masks(mask, sc, policy)
    assert again.parties == mask.parties
    assert again.version == mask.version + 1


@given(party_sizes, st.integers(0, 10_000), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_refresh_keeps_invariants_on_new_scores(sizes, s1, s2):
    old = mk.tripartition(_scores(sizes, s1))
    new_sc = _scores(sizes, s2)
    pvals = {j: float(v) for p in new_sc for j, v in zip(new_sc[p][0], np.random.default_rng(s2).random(sizes[p]))}
    out = mk.refresh_masks(old, new_sc, mk.RefreshPolicy(hysteresis_margin=0.1), pvals)
    _check_partition(out, new_sc)


def test_hysteresis_holds_near_boundary():
    cols = np.arange(10)
    old = mk.tripartition({0: (cols, np.linspace(1, 0, 10))}, 0.5, 0.5)
    # swap ranks 4 and 5: inside the dead band, nothing moves
    sc = np.linspace(1, 0, 10)
    sc[[4, 5]] = sc[[5, 4]]
    kept = mk.refresh_masks(old, {0: (cols, sc)}, mk.RefreshPolicy(hysteresis_margin=0.1))
    assert kept.parties[0].M == old.parties[0].M
    # with no margin the swap goes through
    moved = mk.refresh_masks(old, {0: (cols, sc)}, mk.RefreshPolicy(hysteresis_margin=0.0))
    assert 5 in moved.parties[0].M and 4 not in moved.parties[0].M


def test_table_hsic_matches_gram_hsic():
    rng = np.random.default_rng(0)
    g = rng.integers(0, 2, 40)
    b = np.where(rng.random(40) < 0.7, g * 2, rng.integers(0, 3, 40))
    counts = np.zeros((2, 3))
    np.add.at(counts, (g, b), 1)
    K = (g[:, None] == g[None, :]).astype(float)
    L = (b[:, None] == b[None, :]).astype(float)
    assert np.isclose(mk.table_hsic(counts), nk.hsic(K, L))


def test_score_from_table_gap_sign_and_empty_row():
    gap, h = mk.score_from_table(np.array([[10.0, 0.0], [0.0, 10.0]]))
    assert abs(gap) == 1.0 and h > 0
    assert mk.score_from_table(np.array([[0.0, 0.0], [3.0, 1.0]])) is None


def test_discover_finds_dependent_columns():
    rng = np.random.default_rng(0)
    n = 600
    s = rng.integers(0, 2, n)
    X = rng.normal(size=(n, 6))
    X[:, [0, 4]] += 2.0 * s[:, None]
    layout = data.VerticalLayout((("A", (0, 1, 2)), ("B", (3, 4, 5))))
    ledger = pv.BudgetLedger(6)
    disc = mk.discover(X, s, layout, rng, ledger, sigma=0.02, rho_M=0.3, rho_P=0.5)
    assert disc.mask.parties[0].M == (0,) and disc.mask.parties[1].M == (4,)
    assert ledger.remaining == 0


def test_benjamini_hochberg_oracle():
    p = np.array([0.01, 0.04, 0.03, 0.2])
    # sorted: .01 <= .025, .03 <= .05, .04 <= .075, .2 > .1
    assert mk.benjamini_hochberg(p, 0.1).tolist() == [True, True, True, False]
    assert not mk.benjamini_hochberg(np.array([0.5, 0.9]), 0.1).any()


def test_validation_demotes_and_promotes():
    layout = data.VerticalLayout((("A", (0, 1, 2)),))
    mask = mk.FeatureMask((mk.PartyRoles((0,), (1, 2), ()),))
    X = np.zeros((5, 3))

    def gen(X, t):
        out = X.copy()
        out[:, 0] += 1.0  # N column moved
        out[:, 1] += 1.0  # responsive mediator
        return out

    rep = mk.interventional_validate(mask, gen, X, np.zeros(5, int))
    assert rep.violations == [0] and rep.unresponsive == [2]
    assert rep.revised.parties[0].M == (0, 1) and rep.revised.parties[0].N == (2,)
    rep.revised.validate(layout)
    assert mk.interventional_validate(mask, None, X, np.zeros(5, int)).report_only


def test_mask_file_roundtrip(tmp_path):
    layout = data.VerticalLayout((("A", (0, 1)), ("B", (2,))))
    mask = mk.FeatureMask((mk.PartyRoles((0,), (1,), (1,)), mk.PartyRoles((), (2,), ())), 3, 0.6, 0.5, "abc")
    mk.save_mask(tmp_path / "m.json", mask, layout, ["a", "b", "c"])
    assert mk.load_mask(tmp_path / "m.json", layout, ["a", "b", "c"]) == mask
