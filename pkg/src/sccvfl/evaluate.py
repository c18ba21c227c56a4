"""Test-split scoring of a trained model: metrics, counterfactual gap, probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import generator as cg
from . import metrics as mt
from .engine import Splits, TrainedModel


@dataclass
class Evaluation:
    metrics: mt.MetricsRecord
    attacks: mt.AttackReport | None
    comm: dict
    epochs: int
    best_epoch: int
    temperature: float

    def row(self) -> dict:
        out = self.metrics.row()
        out.update(epochs=self.epochs, best_epoch=self.best_epoch, temperature=self.temperature,
                   feature_mb=self.comm["feature_mb"], model_mb=self.comm["model_mb"])
        return out


def evaluate(tm: TrainedModel, splits: Splits, attacks: bool = True,
             aia_budgets=mt.AIA_BUDGETS, pgd_eps=mt.PGD_EPSILONS) -> Evaluation:
    te = splits.test
    rng = np.random.default_rng([tm.seed, 7919])
    logits, cache = tm.model.forward(te.X)
    acc, ll = mt.utility_metrics(logits / tm.temperature, te.y)
    targets = cg.counterfactual_targets(te.s, tm.n_groups, rng)
    X_cf = tm.eval_mechanism.apply(te.X, te.s, cache.h, rng, targets)
    logits_cf = tm.model.forward(X_cf)[0]
    # the gap is measured on raw logits; temperature only enters the log-loss
    gap = mt.scg(logits, logits_cf, tm.weights.p)
    fr = mt.flip_rate(logits.argmax(1), logits_cf.argmax(1))
    pred = logits.argmax(1)
    dp, eo, flags = mt.group_fairness(pred, te.y, te.s)
    rec = mt.MetricsRecord(acc, ll, gap, fr, dp, eo, tm.seed, flags)
    report = None
    if attacks:
        report = attack(tm, splits, aia_budgets, pgd_eps)
    return Evaluation(rec, report, tm.comm, tm.epochs_run, tm.best_epoch, tm.temperature)


def attack(tm: TrainedModel, splits: Splits, aia_budgets=mt.AIA_BUDGETS,
           pgd_eps=mt.PGD_EPSILONS) -> mt.AttackReport:
    te = splits.test
    rng = np.random.default_rng([tm.seed, 104729])
    notes = []
    try:
        aia = mt.aia_attack(tm.model.representation(te.X), te.s, rng, aia_budgets,
                            hidden=tm.hyper.hidden, lr=tm.hyper.lr_adv)
    except mt.AttackUnavailable as e:
        aia = {int(T): float("nan") for T in aia_budgets}
        notes.append(str(e))
    S = sorted(j for r in tm.mask.parties for j in r.M)
    fn = mt.model_grad_fn(tm.model.forward, tm.model.backward)
    pgd = mt.pgd_curve(fn, te.X, S, pgd_eps)
    if not S:
        notes.append("empty mediator set: PGD success is zero by construction")
    return mt.AttackReport(aia, pgd, tm.seed, f"mlp(hidden={tm.hyper.hidden}, adam lr={tm.hyper.lr_adv}, batch=32)",
                           notes)
