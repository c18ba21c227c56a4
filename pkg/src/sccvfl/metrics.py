"""Utility and fairness metrics, seed aggregation and the two probes.

The attribute-inference attack trains a fresh 2-layer classifier on frozen
fused representations. The subspace PGD attack perturbs only a chosen set
of input coordinates inside an l-infinity ball.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numkit as nk

AIA_BUDGETS = (10, 20, 40, 80)
PGD_EPSILONS = (0.02, 0.05, 0.10, 0.20)


class AttackUnavailable(ValueError):
    pass


class AggregationError(ValueError):
    pass


@dataclass
class MetricsRecord:
    accuracy: float
    logloss: float
    scg: float
    fr: float
    dp_diff: float
    eo_gap: float
    seed: int = 0
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        if self.logloss < 0 or self.scg < 0:
            raise ValueError("logloss and scg must be nonnegative")
        if not 0.0 <= self.fr <= 100.0:
            raise ValueError("flip rate is a percentage")

    def row(self) -> dict:
        d = asdict(self)
        d["flags"] = ";".join(self.flags)
        return d


@dataclass
class AttackReport:
    aia_sr: dict[int, float]
    pgd_sr: dict[float, float]
    seed: int = 0
    attacker: str = "mlp(hidden=64, adam, batch=32)"
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for v in list(self.aia_sr.values()) + list(self.pgd_sr.values()):
            if not (0.0 <= v <= 100.0 or math.isnan(v)):
                raise ValueError("success rates are percentages")

    def row(self) -> dict:
        out = {"seed": self.seed}
        out.update({f"aia_T{t}": v for t, v in self.aia_sr.items()})
        out.update({f"pgd_eps{e:g}": v for e, v in self.pgd_sr.items()})
        return out


# ---------------------------------------------------------------- metrics

def utility_metrics(logits: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    logits = np.asarray(logits, float)
    y = np.asarray(y, int)
    acc = float((logits.argmax(1) == y).mean())
    lp = nk.log_softmax(logits)
    return acc, float(-lp[np.arange(len(y)), y].mean())


def scg(logits: np.ndarray, logits_cf: np.ndarray, p: int = 1) -> float:
    """Mean logit gap; l1 per row for classification, squared l2 for p=2."""
    a, b = np.asarray(logits, float), np.asarray(logits_cf, float)
    if a.shape != b.shape:
        raise ValueError("logit batches are not matched")
    d = a - b
    return float(np.abs(d).sum(1).mean()) if p == 1 else float((d ** 2).sum(1).mean())


def flip_rate(labels: np.ndarray, labels_cf: np.ndarray) -> float:
    a, b = np.asarray(labels), np.asarray(labels_cf)
    if a.shape != b.shape:
        raise ValueError("label batches are not matched")
    return 100.0 * float((a != b).mean())


def group_fairness(pred: np.ndarray, y: np.ndarray, s: np.ndarray) -> tuple[float, float, list[str]]:
    """Max pairwise gaps in positive rate (DP) and in TPR/FPR (EO)."""
    pred, y, s = (np.asarray(a, int) for a in (pred, y, s))
    groups = np.unique(s)
    if len(groups) < 2:
        raise ValueError("group fairness needs at least two groups present")
    flags: list[str] = []
    rate, tpr, fpr = {}, {}, {}
    for g in groups:
        sel = s == g
        rate[g] = (pred[sel] == 1).mean()
        pos, neg = sel & (y == 1), sel & (y == 0)
        if pos.any():
            tpr[g] = (pred[pos] == 1).mean()
        else:
            flags.append(f"group {g}: no positives, TPR excluded")
        if neg.any():
            fpr[g] = (pred[neg] == 1).mean()
        else:
            flags.append(f"group {g}: no negatives, FPR excluded")

    def spread(d: dict) -> float:
        return float(max(d.values()) - min(d.values())) if len(d) >= 2 else 0.0

    return spread(rate), max(spread(tpr), spread(fpr)), flags


def aggregate(records: Sequence[Mapping[str, float]]) -> dict[str, tuple[float, float]]:
    """Per-metric sample mean and standard deviation (n - 1 denominator)."""
    if len(records) < 2:
        raise AggregationError("aggregation needs at least two records")
    keys = set(records[0])
    for r in records[1:]:
        if set(r) != keys:
            raise AggregationError("records disagree on their metric columns")
    out = {}
    for k in records[0]:
        v = np.array([float(r[k]) for r in records])
        out[k] = (float(v.mean()), float(v.std(ddof=1)))
    return out


# -------------------------------------------------------------------- AIA

def balanced_split(s: np.ndarray, rng: np.random.Generator, frac: float = 0.5):
    """Subsample every group down to the minority size, then split each group."""
    s = np.asarray(s, int)
    groups, counts = np.unique(s, return_counts=True)
    if len(groups) < 2:
        raise AttackUnavailable("a protected group is absent; attack unavailable")
    k = int(counts.min())
    if k < 2:
        raise AttackUnavailable("minority group too small for a held-out split")
    train, test = [], []
    for g in groups:
        idx = rng.permutation(np.flatnonzero(s == g))[:k]
        cut = int(round(frac * k))
        train.append(idx[:cut])
        test.append(idx[cut:])
    return np.concatenate(train), np.concatenate(test)


def aia_attack(reps: np.ndarray, s: np.ndarray, rng: np.random.Generator,
               budgets: Sequence[int] = AIA_BUDGETS, hidden: int = 64, lr: float = 0.005,
               batch_size: int = 32) -> dict[int, float]:
    """Attacker success (balanced held-out accuracy, percent) per epoch budget.

    A fresh attacker is trained for each budget; all budgets share the same
    balanced split.
    """
    reps = np.asarray(reps, float)
    s = np.asarray(s, int)
    tr, te = balanced_split(s, rng)
    # standardize with attacker-train statistics
    mu, sd = reps[tr].mean(0), reps[tr].std(0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (reps - mu) / sd
    k = int(s.max()) + 1
    out = {}
    for T in budgets:
        local = np.random.default_rng(rng.integers(2 ** 63))
        net = nk.DenseParams.init([Z.shape[1], hidden, k], local)
        opt = nk.OptState.for_params(net.arrays(), lr)
        for _ in range(T):
            order = local.permutation(tr)
            for i in range(0, len(order), batch_size):
                b = order[i:i + batch_size]
                logits, cache = nk.mlp_forward(net, Z[b])
                _, g = nk.softmax_xent(logits, s[b])
                grads, _ = nk.mlp_backward(net, cache, g)
                nk.opt_step(opt, net.arrays(), grads)
                nk.bump(net)
        pred = nk.mlp_forward(net, Z[te])[0].argmax(1)
        out[int(T)] = 100.0 * float(np.mean([np.mean(pred[s[te] == g] == g) for g in np.unique(s[te])]))
    return out


# -------------------------------------------------------------------- PGD

GradFn = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class PGDResult:
    sr: float
    delta: np.ndarray
    flipped: np.ndarray
    flags: list[str] = field(default_factory=list)


def subspace_pgd(grad_fn: GradFn, X: np.ndarray, subspace: Sequence[int], epsilon: float, steps: int = 20,
                 alpha: float | None = None, delta0: np.ndarray | None = None,
                 check: Callable[[np.ndarray], None] | None = None) -> PGDResult:
    """Signed-gradient ascent on the loss against the clean prediction.

    ``grad_fn(X, yhat)`` returns (logits, d loss / d X). Coordinates outside
    ``subspace`` stay zero and the rest are clamped to [-epsilon, epsilon]
    after every step. ``check`` is called on every iterate.
    """
    X = np.asarray(X, float)
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    cols = np.asarray(sorted(set(int(j) for j in subspace)), int)
    logits0, _ = grad_fn(X, np.zeros(len(X), int))
    yhat = logits0.argmax(1)
    if len(cols) == 0 or epsilon == 0:
        flags = ["empty subspace"] if len(cols) == 0 else []
        return PGDResult(0.0, np.zeros_like(X), np.zeros(len(X), bool), flags)
    alpha = epsilon / 5.0 if alpha is None else alpha
    support = np.zeros(X.shape[1], bool)
    support[cols] = True
    delta = np.zeros_like(X) if delta0 is None else np.clip(np.where(support, delta0, 0.0), -epsilon, epsilon)
    for _ in range(steps):
        _, g = grad_fn(X + delta, yhat)
        delta = delta + alpha * np.sign(g)
        delta = np.clip(np.where(support, delta, 0.0), -epsilon, epsilon)
        if check is not None:
            check(delta)
    flipped = grad_fn(X + delta, yhat)[0].argmax(1) != yhat
    return PGDResult(100.0 * float(flipped.mean()), delta, flipped)


def pgd_curve(grad_fn: GradFn, X: np.ndarray, subspace: Sequence[int],
              epsilons: Sequence[float] = PGD_EPSILONS, steps: int = 20, warm_start: bool = True) -> dict[float, float]:
    """SR per epsilon. With ``warm_start`` each budget starts from the previous
    solution and rows already flipped keep their (still feasible) perturbation,
    which makes the curve nondecreasing."""
    out: dict[float, float] = {}
    prev: PGDResult | None = None
    for eps in sorted(epsilons):
        res = subspace_pgd(grad_fn, X, subspace, eps, steps, delta0=prev.delta if (warm_start and prev) else None)
        if warm_start and prev is not None:
            keep = prev.flipped & ~res.flipped
            res.delta[keep] = prev.delta[keep]
            res.flipped = res.flipped | prev.flipped
            res.sr = 100.0 * float(res.flipped.mean())
        out[float(eps)] = res.sr
        prev = res
    return out


def model_grad_fn(forward: Callable[[np.ndarray], tuple[np.ndarray, object]],
                  backward: Callable[[object, np.ndarray], tuple[object, np.ndarray]]) -> GradFn:
    """Adapter: cross-entropy input gradient from a forward/backward pair."""
    def fn(X: np.ndarray, yhat: np.ndarray):
        logits, cache = forward(X)
        _, g = nk.softmax_xent(logits, yhat)
        _, gX = backward(cache, g)
        return logits, gX
    return fn


def linear_flip_oracle(W: np.ndarray, b: np.ndarray, X: np.ndarray, subspace: Sequence[int],
                       epsilon: float) -> np.ndarray:
    """Closed-form flip set for a 2-logit linear model under an l-inf budget on S."""
    w = W[:, 1] - W[:, 0]
    margin = X @ w + (b[1] - b[0])
    budget = epsilon * np.abs(w[np.asarray(list(subspace), int)]).sum()
    return np.abs(margin) < budget


def warn_small(n: int, what: str) -> None:
    if n < 50:
        warnings.warn(f"{what}: only {n} rows; success rates are coarse", RuntimeWarning, stacklevel=2)
