"""Feature-role discovery: N (non-descendants), M (mediators), P (proxies).

Scores come from private group × bin tables (the default path) or from a
held-out risk comparison with and without the group code. Per party, the
top fraction by combined score becomes M and the top fraction of M
becomes P.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from . import privacy as pv
from .data import VerticalLayout


@dataclass
class FeatureScore:
    feature: int
    party: int
    delta: float
    hsic: float
    combined: float = 0.0
    available: bool = True


@dataclass(frozen=True)
class PartyRoles:
    N: tuple[int, ...]
    M: tuple[int, ...]
    P: tuple[int, ...]

    @property
    def editable(self) -> tuple[int, ...]:
        return tuple(j for j in self.M if j not in set(self.P))


@dataclass(frozen=True)
class FeatureMask:
    """Role sets per party, as global column indices."""
    parties: tuple[PartyRoles, ...]
    version: int = 0
    rho_M: float = 0.60
    rho_P: float = 0.50
    score_hash: str = ""

    def validate(self, layout: VerticalLayout) -> None:
        for p, roles in enumerate(self.parties):
            cols = set(layout.columns(p).tolist())
            N, M, P = set(roles.N), set(roles.M), set(roles.P)
            if N & M or (N | M) != cols or not P <= M:
                raise ValueError(f"party {p}: invalid N/M/P partition")

    def role_of(self, j: int) -> str:
        for roles in self.parties:
            if j in roles.P:
                return "P"
            if j in roles.M:
                return "M"
            if j in roles.N:
                return "N"
        raise KeyError(j)


@dataclass(frozen=True)
class RefreshPolicy:
    interval: int = 50
    hysteresis_margin: float = 0.05
    fdr_q: float = 0.1
    max_refreshes: int = 3

    def __post_init__(self):
        if self.interval < 1 or self.hysteresis_margin < 0 or not 0 < self.fdr_q < 1:
            raise ValueError("invalid refresh policy")


# ---------------------------------------------------------------- scores

def table_hsic(counts: np.ndarray) -> float:
    """Biased HSIC between group and bin indicators under delta kernels.

    For delta kernels tr(KHLH) = n^2 * sum_{g,k} (p_gk - p_g p_k)^2, so the
    estimator is (n / (n-1))^2 times that sum.
    """
    c = np.clip(np.asarray(counts, dtype=float), 0.0, None)
    n = c.sum()
    if n <= 1:
        return 0.0
    p = c / n
    dev = p - p.sum(1, keepdims=True) * p.sum(0, keepdims=True)
    return float((n / (n - 1.0)) ** 2 * (dev * dev).sum())


def score_from_table(table: pv.ContingencyTable | np.ndarray) -> tuple[float, float] | None:
    """(signed probability gap, HSIC) or None when a group row has no mass."""
    counts = table.counts if isinstance(table, pv.ContingencyTable) else np.asarray(table, float)
    c = np.clip(counts, 0.0, None)
    tot = c.sum(1)
    if tot[0] <= 0 or tot[1] <= 0:
        return None
    gaps = c[1] / tot[1] - c[0] / tot[0]
    # largest |gap|; ties go to the positive gap, then the lower bin
    k = max(range(len(gaps)), key=lambda i: (abs(gaps[i]), gaps[i], -i))
    return float(gaps[k]), table_hsic(c)


def _ridge_risk(Xtr, ytr, Xte, yte, alpha: float = 1e-3):
    mu_x, mu_y = Xtr.mean(0), ytr.mean()
    A, b = Xtr - mu_x, ytr - mu_y
    w = np.linalg.solve(A.T @ A + alpha * np.eye(A.shape[1]), A.T @ b) if A.shape[1] else np.zeros(0)
    pred = (Xte - mu_x) @ w + mu_y
    return float(np.mean((yte - pred) ** 2)), pred


def score_predictor_variant(X_party: np.ndarray, z_s: np.ndarray, heldout_frac: float = 0.3,
                            rng: np.random.Generator | None = None, alpha: float = 1e-3):
    """Held-out risk difference per coordinate.

    Each coordinate is regressed on the party's other coordinates, once with
    and once without z_s appended (same centred ridge predictor). Returns
    (delta, hsic) where delta = risk_with - risk_without and hsic is
    computed between the without-z_s residuals and z_s on the held-out rows.
    """
    rng = rng or np.random.default_rng(0)
    X = np.asarray(X_party, float)
    Z = np.asarray(z_s, float).reshape(len(X), -1)
    n, d = X.shape
    perm = rng.permutation(n)
    n_te = max(2, int(round(heldout_frac * n)))
    te, tr = perm[:n_te], perm[n_te:]
    delta = np.zeros(d)
    hs = np.zeros(d)
    Lz = nk.rbf_gram(Z[te]) if np.ptp(Z[te]) > 0 else np.ones((n_te, n_te))
    for j in range(d):
        y = X[:, j]
        if np.ptp(y) == 0:
            continue
        others = np.delete(X, j, axis=1)
        r0, pred0 = _ridge_risk(others[tr], y[tr], others[te], y[te], alpha)
        both = np.hstack([others, Z])
        r1, _ = _ridge_risk(both[tr], y[tr], both[te], y[te], alpha)
        delta[j] = r1 - r0
        resid = y[te] - pred0
        hs[j] = nk.hsic(nk.rbf_gram(resid), Lz)
    return delta, hs


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(initial=0.0), v.max(initial=0.0)
    return np.zeros_like(v) if hi - lo <= 0 else (v - lo) / (hi - lo)


def combine_scores(delta, hsic, weights: tuple[float, float] = (1.0, 1.0),
                   normalize: bool = True) -> np.ndarray:
    d = np.abs(np.asarray(delta, float))
    h = np.clip(np.asarray(hsic, float), 0.0, None)
    if not (np.all(np.isfinite(d)) and np.all(np.isfinite(h))):
        raise ValueError("score components must be finite")
    if normalize:
        d, h = _minmax(d), _minmax(h)
    return weights[0] * d + weights[1] * h


def rank_order(scores: Sequence[float]) -> np.ndarray:
    """Positions sorted by descending score, ties by ascending index."""
    s = np.asarray(scores, float)
    return np.lexsort((np.arange(len(s)), -s))


def _ceil_frac(rho: float, n: int) -> int:
    return int(math.ceil(rho * n - 1e-9))


def tripartition(scores: dict[int, tuple[Sequence[int], Sequence[float]]], rho_M: float = 0.60,
                 rho_P: float = 0.50, version: int = 0, score_hash: str = "") -> FeatureMask:
    """``scores`` maps party -> (global column indices, combined scores)."""
    if not (0 < rho_M <= 1 and 0 < rho_P <= 1):
        raise ValueError("rho_M and rho_P must lie in (0, 1]")
    parties = []
    for p in sorted(scores):
        cols, sc = scores[p]
        cols = np.asarray(cols, int)
        if len(cols) == 0:
            parties.append(PartyRoles((), (), ()))
            continue
        order = cols[rank_order(sc)]
        m = _ceil_frac(rho_M, len(cols))
        M = order[:m]
        P = M[:_ceil_frac(rho_P, m)] if m else M[:0]
        N = order[m:]
        parties.append(PartyRoles(tuple(sorted(N.tolist())), tuple(sorted(M.tolist())),
                                  tuple(sorted(P.tolist()))))
    return FeatureMask(tuple(parties), version, rho_M, rho_P, score_hash)


def score_hash(values) -> str:
    arr = np.ascontiguousarray(np.asarray(values, dtype="<f8"))
    return hashlib.sha256(arr.tobytes()).hexdigest()[:16]


# ------------------------------------------------------------- discovery

@dataclass
class Discovery:
    tables: dict[str, list[pv.ContingencyTable]]
    scores: list[FeatureScore]
    pvalues: np.ndarray
    mask: FeatureMask
    S: float
    edges: dict[int, np.ndarray] = field(default_factory=dict)


def feature_tables(X: np.ndarray, s: np.ndarray, K: int = 10, strategy: str = "equal-width",
                   n_groups: int = 2, edges: dict[int, np.ndarray] | None = None):
    """Raw tables per feature; one table for binary s, one-vs-rest otherwise."""
    raw, fitted = [], {}
    for j in range(X.shape[1]):
        bins, e = pv.bin_feature(X[:, j], K, strategy, None if edges is None else edges.get(j))
        fitted[j] = e
        if n_groups <= 2:
            raw.append([pv.build_contingency(bins, s, K, feature=j)])
        else:
            raw.append([pv.build_contingency(bins, s, K, feature=j, group=g) for g in range(n_groups)])
    return raw, fitted


def table_pvalue(counts: np.ndarray, n_perm: int, rng: np.random.Generator) -> float:
    """Permutation p-value of table HSIC with margins held fixed.

    Noisy counts are rounded and clamped to a pseudo-sample first.
    """
    c = np.rint(np.clip(counts, 0.0, None)).astype(int)
    g = np.repeat(np.arange(2), c.sum(1))
    b = np.concatenate([np.repeat(np.arange(c.shape[1]), row) for row in c])
    if len(g) < 3 or c.sum(1).min() == 0:
        return 1.0
    obs = table_hsic(c)
    K = c.shape[1]
    hits = 0
    for _ in range(n_perm):
        t = np.zeros((2, K))
        np.add.at(t, (rng.permutation(g), b), 1.0)
        hits += table_hsic(t) >= obs - 1e-15
    return (1.0 + hits) / (1.0 + n_perm)


def discover(X: np.ndarray, s: np.ndarray, layout: VerticalLayout, rng: np.random.Generator,
             ledger: pv.BudgetLedger, sigma: float = 0.02, delta: float = 1e-5, K: int = 10,
             S: float | None = None, rho_M: float = 0.60, rho_P: float = 0.50, n_groups: int = 2,
             mask_version: int = 0, n_perm: int = 0, strategy: str = "equal-width",
             edges: dict[int, np.ndarray] | None = None, normalize: bool = True) -> Discovery:
    """Release noisy tables for every feature, score them and tri-partition."""
    raw, fitted = feature_tables(X, s, K, strategy, n_groups, edges)
    if S is None:
        S = pv.default_clip_bound([t for ts in raw for t in ts])
    noisy: dict[str, list[pv.ContingencyTable]] = {}
    deltas = np.zeros(X.shape[1])
    hs = np.zeros(X.shape[1])
    avail = np.ones(X.shape[1], bool)
    pvals = np.ones(X.shape[1])
    for j, ts in enumerate(raw):
        released = []
        for t in ts:
            out, _ = pv.gaussian_release(pv.clip_table(t, S), sigma, S, rng, ledger, delta, mask_version)
            released.append(out)
        noisy[str(j)] = released
        per = [score_from_table(t) for t in released]
        ok = [q for q in per if q is not None]
        if not ok:
            avail[j] = False
            continue
        deltas[j] = max((q[0] for q in ok), key=abs)
        hs[j] = max(q[1] for q in ok)
        if n_perm:
            pvals[j] = min(table_pvalue(t.counts, n_perm, rng) for t in released)
    scores, per_party = [], {}
    for p in range(layout.m):
        cols = layout.columns(p)
        comb = combine_scores(deltas[cols], hs[cols], normalize=normalize)
        comb = np.where(avail[cols], comb, 0.0)
        per_party[p] = (cols, comb)
        for j, c in zip(cols, comb):
            scores.append(FeatureScore(int(j), p, float(deltas[j]), float(hs[j]), float(c), bool(avail[j])))
    scores.sort(key=lambda f: f.feature)
    h = score_hash([f.combined for f in scores])
    mask = tripartition(per_party, rho_M, rho_P, mask_version, h)
    return Discovery(noisy, scores, pvals, mask, float(S), fitted)


def party_scores(scores: Sequence[FeatureScore], layout: VerticalLayout):
    by = {f.feature: f.combined for f in scores}
    return {p: (layout.columns(p), np.array([by[int(j)] for j in layout.columns(p)]))
            for p in range(layout.m)}


# ------------------------------------------------------------ validation

@dataclass
class ValidationReport:
    n_violation: dict[int, float]
    response: dict[int, float]
    violations: list[int]
    unresponsive: list[int]
    revised: FeatureMask | None
    reasons: list[str]
    report_only: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "n_violation": {str(k): v for k, v in self.n_violation.items()},
            "response": {str(k): v for k, v in self.response.items()},
            "violations": self.violations, "unresponsive": self.unresponsive,
            "reasons": self.reasons, "report_only": self.report_only}, indent=2)


def interventional_validate(mask: FeatureMask, generate: Callable[[np.ndarray, np.ndarray], np.ndarray] | None,
                            X: np.ndarray, s: np.ndarray, gamma: float = 0.2,
                            tol_id: float = 1e-6, tol_resp: float | None = None,
                            revise: bool = True) -> ValidationReport:
    """Toggle every row to another group and check the generator's edits.

    ``generate(X, s_target)`` returns full-width counterfactual rows. N
    coordinates must not move by more than ``tol_id``; editable mediators
    (M minus P, which pass through) must move by at least ``tol_resp`` on
    average. Unresponsive mediators are demoted to N and edited N columns
    are promoted to M.
    """
    tol_resp = 1e-3 * gamma if tol_resp is None else tol_resp
    if generate is None:
        return ValidationReport({}, {}, [], [], None, ["no generator: report only"], True)
    n_groups = int(s.max()) + 1 if len(s) else 2
    target = (s + 1) % max(n_groups, 2)
    diff = np.abs(generate(X, target) - X)
    viol, resp, bad_n, dead = {}, {}, [], []
    reasons = []
    for roles in mask.parties:
        for j in roles.N:
            viol[j] = float(diff[:, j].max())
            if viol[j] > tol_id:
                bad_n.append(j)
                reasons.append(f"column {j}: edited by {viol[j]:.3g} while in N")
        for j in roles.editable:
            resp[j] = float(diff[:, j].mean())
            if resp[j] < tol_resp:
                dead.append(j)
                reasons.append(f"column {j}: mean response {resp[j]:.3g} below {tol_resp:.3g}")
    revised = None
    if revise and (bad_n or dead):
        parties = []
        for roles in mask.parties:
            N = (set(roles.N) - set(bad_n)) | (set(roles.M) & set(dead))
            M = (set(roles.M) - set(dead)) | (set(roles.N) & set(bad_n))
            P = set(roles.P) & M
            parties.append(PartyRoles(tuple(sorted(N)), tuple(sorted(M)), tuple(sorted(P))))
        revised = replace(mask, parties=tuple(parties), version=mask.version + 1)
    return ValidationReport(viol, resp, sorted(bad_n), sorted(dead), revised, reasons)


# --------------------------------------------------------------- refresh

def benjamini_hochberg(pvalues, q: float) -> np.ndarray:
    p = np.asarray(pvalues, float)
    n = len(p)
    if n == 0:
        return np.zeros(0, bool)
    order = np.argsort(p, kind="stable")
    passed = p[order] <= q * np.arange(1, n + 1) / n
    keep = np.zeros(n, bool)
    if passed.any():
        keep[order[:np.max(np.flatnonzero(passed)) + 1]] = True
    return keep


def _hysteresis(members: set[int], ranked: Sequence[int], k: int, margin: float,
                allowed: set[int] | None = None) -> set[int]:
    """Top-k membership with a dead band around the boundary.

    The boundary sits between positions k-1 and k. A member leaves only if
    it now sits more than ``margin`` positions past the boundary; an
    outsider joins only if it sits more than ``margin`` positions inside
    (and is in ``allowed`` when given).
    """
    bnd = k - 0.5
    out = set()
    for pos, j in enumerate(ranked):
        if j in members:
            if not pos - bnd > margin:
                out.add(j)
        elif bnd - pos > margin and (allowed is None or j in allowed):
            out.add(j)
    return out


def refresh_masks(old: FeatureMask, new_scores: dict[int, tuple[Sequence[int], Sequence[float]]],
                  policy: RefreshPolicy = RefreshPolicy(), pvalues: dict[int, float] | None = None,
                  score_hash_: str = "") -> FeatureMask:
    """Hysteresis update of N/M/P. Promotions into M also need a BH
    discovery among the party's p-values when ``pvalues`` is given."""
    parties = []
    for p, roles in enumerate(old.parties):
        cols, sc = new_scores[p]
        cols = np.asarray(cols, int)
        if len(cols) == 0:
            parties.append(roles)
            continue
        ranked = cols[rank_order(sc)].tolist()
        d = len(cols)
        margin = policy.hysteresis_margin * d
        allowed = None
        if pvalues is not None:
            keep = benjamini_hochberg([pvalues[int(j)] for j in cols], policy.fdr_q)
            allowed = {int(j) for j, kp in zip(cols, keep) if kp}
        M = _hysteresis(set(roles.M), ranked, _ceil_frac(old.rho_M, d), margin, allowed)
        inner = [j for j in ranked if j in M]
        P = _hysteresis(set(roles.P) & M, inner, _ceil_frac(old.rho_P, len(inner)) if inner else 0,
                        policy.hysteresis_margin * len(inner))
        N = set(cols.tolist()) - M
        parties.append(PartyRoles(tuple(sorted(N)), tuple(sorted(M)), tuple(sorted(P))))
    return FeatureMask(tuple(parties), old.version + 1, old.rho_M, old.rho_P, score_hash_ or old.score_hash)


# ---------------------------------------------------------------- mask file

def mask_to_dict(mask: FeatureMask, layout: VerticalLayout, names: Sequence[str]) -> dict:
    out = {"version": mask.version, "rho_M": mask.rho_M, "rho_P": mask.rho_P,
           "score_hash": mask.score_hash, "parties": {}}
    for (pname, _), roles in zip(layout.parties, mask.parties):
        out["parties"][pname] = {k: [names[j] for j in getattr(roles, k)] for k in ("N", "M", "P")}
    return out


def save_mask(path: str | Path, mask: FeatureMask, layout: VerticalLayout, names: Sequence[str]) -> None:
    Path(path).write_text(json.dumps(mask_to_dict(mask, layout, names), indent=2))


def mask_from_dict(d: dict, layout: VerticalLayout, names: Sequence[str]) -> FeatureMask:
    index = {n: j for j, n in enumerate(names)}
    parties = []
    for pname, _ in layout.parties:
        entry = d["parties"][pname]
        parties.append(PartyRoles(*(tuple(sorted(index[n] for n in entry[k])) for k in ("N", "M", "P"))))
    mask = FeatureMask(tuple(parties), int(d["version"]), float(d["rho_M"]), float(d["rho_P"]),
                       str(d.get("score_hash", "")))
    mask.validate(layout)
    return mask


def load_mask(path: str | Path, layout: VerticalLayout, names: Sequence[str]) -> FeatureMask:
    return mask_from_dict(json.loads(Path(path).read_text()), layout, names)
