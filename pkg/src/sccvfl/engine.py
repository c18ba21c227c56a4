"""Split-learning engine.

Parties own column blocks of the input. In the default ``shared`` mode each
party computes its slice of the first layer of a shared 2-layer MLP, the
server sums the slices, finishes the MLP and applies a linear head. In
``party`` mode each party runs its own 2-layer encoder and the server
concatenates the outputs.

Training runs three phases: discovery (private tables, tri-partition),
generator warm-up (generators train next to the supervised model) and joint
optimization with the consistency penalty ramped in, periodic mask refresh
and early stopping on logloss + SCG + FR/100.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import generator as cg
from . import masks as mk
from . import numkit as nk
from . import privacy as pv
from .data import Dataset, SplitSpec, VerticalLayout, apply_preprocess, fit_preprocess, make_splits

log = logging.getLogger(__name__)

STREAMS = ("init", "dropout", "batch", "dp", "gen_init", "gen", "adv_init", "cf", "eval", "refresh", "attack",
           "tgen_init", "tgen")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators so optional parts never shift the others."""
    kids = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(k) for name, k in zip(STREAMS, kids)}


# ---------------------------------------------------------------- config

MASK_MODES = ("none", "all", "M", "shuffle", "M-per-client")


@dataclass(frozen=True)
class MethodConfig:
    name: str
    use_cls: bool = True
    use_cons: bool = False
    use_gen: bool = False
    use_adv: bool = False
    mask_mode: str = "none"
    adv_scope: str = "server"
    use_validity: bool = False

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"unknown mask mode {self.mask_mode!r}")
        if self.adv_scope not in ("server", "party"):
            raise ConfigError(f"unknown adversary scope {self.adv_scope!r}")
        if self.use_cons and self.mask_mode == "none":
            raise ConfigError("consistency needs a counterfactual mask mode")
        if self.use_gen and self.mask_mode not in ("all", "M", "M-per-client"):
            raise ConfigError("generator training needs a generator mask mode")

    @property
    def generator_mode(self) -> str:
        """Mask mode of the counterfactuals used when scoring this method."""
        return "M-per-client" if self.mask_mode == "none" else self.mask_mode


_MATRIX = {
    "plain": MethodConfig("plain"),
    "adv_nomask": MethodConfig("adv_nomask", use_adv=True, adv_scope="server"),
    "uniform_cf": MethodConfig("uniform_cf", use_cons=True, use_gen=True, mask_mode="all"),
    "policy_blind": MethodConfig("policy_blind", use_cons=True, use_gen=True, mask_mode="M"),
    "server_consistency": MethodConfig("server_consistency", use_cons=True, mask_mode="shuffle"),
    "scc_vfl": MethodConfig("scc_vfl", use_cons=True, use_gen=True, use_adv=True,
                            mask_mode="M-per-client", adv_scope="server", use_validity=True),
    "scc_no_mask": MethodConfig("scc_no_mask", use_cons=True, use_gen=True, use_adv=True,
                                mask_mode="all", adv_scope="server", use_validity=True),
    "scc_no_generator": MethodConfig("scc_no_generator", use_cons=True, use_adv=True,
                                     mask_mode="shuffle", adv_scope="server"),
    "scc_no_consistency": MethodConfig("scc_no_consistency", use_gen=True, use_adv=True,
                                       mask_mode="M-per-client", adv_scope="server", use_validity=True),
}

BASELINES = ("adv_nomask", "uniform_cf", "policy_blind", "server_consistency")
ABLATIONS = ("scc_vfl", "scc_no_mask", "scc_no_generator", "scc_no_consistency")


def method_matrix(name: str) -> MethodConfig:
    try:
        return _MATRIX[name]
    except KeyError:
        raise ConfigError(f"unknown method {name!r}; known: {sorted(_MATRIX)}") from None


def method_names() -> list[str]:
    return list(_MATRIX)


@dataclass(frozen=True)
class LossWeights:
    lam_cons_max: float = 1.2
    lam_gen: float = 0.01
    lam_adv: float = 0.03
    alpha_v: float = 1.0
    beta_v: float = 1.0
    eta_v: float = 0.03
    warmup_epochs: int = 40
    ramp_epochs: int = 20
    p: int = 1

    def __post_init__(self):
        vals = (self.lam_cons_max, self.lam_gen, self.lam_adv, self.alpha_v, self.beta_v, self.eta_v)
        if min(vals) < 0 or self.warmup_epochs < 0 or self.ramp_epochs < 0:
            raise ConfigError("loss weights and schedule lengths must be nonnegative")
        if self.p not in (1, 2):
            raise ConfigError("consistency norm order must be 1 or 2")

    def lam_cons(self, epoch: int) -> float:
        if epoch < self.warmup_epochs:
            return 0.0
        if self.ramp_epochs == 0:
            return self.lam_cons_max
        return self.lam_cons_max * min(1.0, (epoch - self.warmup_epochs) / self.ramp_epochs)


@dataclass(frozen=True)
class Hyper:
    hidden: int = 64
    dropout: float = 0.05
    latent_dim: int = 8
    optimizer: str = "adamw"
    weight_decay: float = 5e-4
    lr_backbone: float = 0.015
    lr_gen: float = 0.010
    lr_adv: float = 0.005
    batch_size: int | None = None
    max_epochs: int = 300
    patience: int = 35
    fuse_mode: str = "shared"
    cf_scale: float = 0.20
    rho_M: float = 0.60
    rho_P: float = 0.50
    bins: int = 10
    sigma_sketch: float = 0.02
    delta: float = 1e-5
    clip_S: float | None = None
    zs_dims: int = 2
    gen_hidden: int = 32
    gen_steps: int = 3
    gen_batch: int = 128
    gen_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    adv_hidden: int = 64
    lambda_grl: float = 1.0
    refresh_interval: int = 50
    max_refreshes: int = 3
    hysteresis_margin: float = 0.05
    fdr_q: float = 0.1
    n_perm: int = 100
    secure_validity: bool = True
    sample_cf: bool = True
    cf_edit: str = "abduct"
    # generators train during warmup only, then stay fixed (refresh retrains the rebuilt ones)
    freeze_gen: bool = True
    # consistency gap divided by cf_scale (sensitivity per unit edit) rather than the raw gap
    cons_per_unit: bool = True

    def __post_init__(self):
        if self.fuse_mode not in ("shared", "party"):
            raise ConfigError(f"unknown fuse mode {self.fuse_mode!r}")
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def table_c1(dataset: str, method: str = "scc_vfl") -> tuple[Hyper, LossWeights]:
    """Per-dataset defaults for architecture, optimizer and schedule."""
    if dataset == "german":
        return Hyper(), LossWeights()
    if dataset == "heart":
        return (Hyper(hidden=32, dropout=0.1, latent_dim=16, optimizer="adam", weight_decay=0.0,
                      lr_backbone=0.010, lr_gen=0.010, lr_adv=0.005, max_epochs=200, patience=25),
                LossWeights(warmup_epochs=30))
    if dataset == "compas":
        epochs = 150 if method.startswith("scc") else 80
        return (Hyper(hidden=32, dropout=0.1, latent_dim=8, optimizer="adam", weight_decay=0.0,
                      lr_backbone=0.005, lr_gen=0.005, lr_adv=0.003, max_epochs=epochs, patience=25),
                LossWeights(warmup_epochs=25))
    return Hyper(), LossWeights()


# ----------------------------------------------------------------- model

@dataclass
class ForwardCache:
    party: list[nk.MLPCache]
    u: list[np.ndarray]
    a1: np.ndarray | None
    m1: np.ndarray | None
    server: nk.MLPCache | None
    h: np.ndarray
    m2: np.ndarray | None
    head: nk.MLPCache


@dataclass
class SplitModel:
    layout: VerticalLayout
    mode: str
    parties: list[nk.DenseParams]
    server: nk.DenseParams | None
    head: nk.DenseParams
    dropout: float = 0.0

    @classmethod
    def init(cls, layout: VerticalLayout, n_classes: int, hyper: Hyper, rng: np.random.Generator) -> "SplitModel":
        H = hyper.hidden
        if hyper.fuse_mode == "shared":
            d = sum(len(layout.columns(p)) for p in range(layout.m))
            # one He-uniform first layer over all columns, sliced by party
            W1 = rng.uniform(-1.0, 1.0, size=(d, H)) * math.sqrt(6.0 / d)
            pos = {j: i for i, j in enumerate(layout.order())}
            parties = []
            for p in range(layout.m):
                rows = [pos[j] for j in layout.columns(p)]
                parties.append(nk.DenseParams([W1[rows]], [np.zeros(H)], ["linear"], [0.0]))
            server = nk.DenseParams.init([H, H], rng, acts=["relu"], dropout=[0.0])
            head = nk.DenseParams.init([H, n_classes], rng)
            return cls(layout, "shared", parties, server, head, hyper.dropout)
        parties = [nk.DenseParams.init([len(layout.columns(p)), H, H], rng, acts=["relu", "relu"],
                                       dropout=[hyper.dropout, 0.0])
                   for p in range(layout.m)]
        head = nk.DenseParams.init([H * layout.m, n_classes], rng)
        return cls(layout, "party", parties, None, head, hyper.dropout)

    # -- parameter plumbing
    def modules(self) -> list[nk.DenseParams]:
        return self.parties + ([self.server] if self.server is not None else []) + [self.head]

    def arrays(self) -> list[np.ndarray]:
        return [a for mdl in self.modules() for a in mdl.arrays()]

    def named(self) -> dict[str, np.ndarray]:
        out = {}
        for p, mdl in enumerate(self.parties):
            out.update(mdl.named(f"party{p}."))
        if self.server is not None:
            out.update(self.server.named("server."))
        out.update(self.head.named("head."))
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def activation_widths(self) -> list[int]:
        return [mdl.out_dim for mdl in self.parties]

    def snapshot(self) -> list[np.ndarray]:
        return [a.copy() for a in self.arrays()]

    def restore(self, snap: Sequence[np.ndarray]) -> None:
        for a, b in zip(self.arrays(), snap):
            a[...] = b
        nk.bump(*self.modules())

    def blocks(self, X: np.ndarray) -> list[np.ndarray]:
        return [X[:, self.layout.columns(p)] for p in range(self.layout.m)]

    # -- forward / backward
    def sample_masks(self, n: int, rng: np.random.Generator) -> dict:
        """Dropout masks for one batch; pass the same dict to replay them."""
        if self.dropout <= 0:
            return {}
        keep = 1.0 - self.dropout
        if self.mode == "shared":
            H = self.server.in_dim
            return {"m1": (rng.random((n, H)) >= self.dropout) / keep,
                    "m2": (rng.random((n, H)) >= self.dropout) / keep}
        return {"party": [nk.dropout_masks(mdl, n, rng) for mdl in self.parties]}

    def forward(self, X: np.ndarray, masks: dict | None = None):
        """Logits and cache. ``masks`` from :meth:`sample_masks` enables dropout."""
        masks = masks or {}
        pc, us = [], []
        for p, (mdl, xp) in enumerate(zip(self.parties, self.blocks(X))):
            pm = masks["party"][p] if "party" in masks else None
            u, c = nk.mlp_forward(mdl, xp, train_mode=pm is not None, masks=pm)
            pc.append(c)
            us.append(u)
        if self.mode == "shared":
            a1 = fuse(us, "shared")
            r1 = np.maximum(a1, 0.0)
            m1, m2 = masks.get("m1"), masks.get("m2")
            if m1 is not None:
                r1 = r1 * m1
            h, sc = nk.mlp_forward(self.server, r1)
            logits, hc = nk.mlp_forward(self.head, h * m2 if m2 is not None else h)
            return logits, ForwardCache(pc, us, a1, m1, sc, h, m2, hc)
        h = fuse(us, "party")
        logits, hc = nk.mlp_forward(self.head, h)
        return logits, ForwardCache(pc, us, None, None, None, h, None, hc)

    def representation(self, X: np.ndarray) -> np.ndarray:
        return self.forward(X)[1].h

    def backward(self, cache: ForwardCache, g_logits: np.ndarray, g_h: np.ndarray | None = None,
                 g_u: Sequence[np.ndarray | None] | None = None):
        """Gradients in :meth:`arrays` order and the input gradient (global column order).

        ``g_h`` is an extra gradient at the fused representation h (before
        dropout), ``g_u`` extra gradients at each party activation.
        """
        g_head, g_in = nk.mlp_backward(self.head, cache.head, g_logits)
        grads_party, inputs = [], []
        if self.mode == "shared":
            if cache.m2 is not None:
                g_in = g_in * cache.m2
            if g_h is not None:
                g_in = g_in + g_h
            g_server, g_r1 = nk.mlp_backward(self.server, cache.server, g_in)
            if cache.m1 is not None:
                g_r1 = g_r1 * cache.m1
            g_a1 = g_r1 * (cache.a1 > 0)
            slices = [g_a1] * len(self.parties)
            tail = g_server + g_head
        else:
            if g_h is not None:
                g_in = g_in + g_h
            offs = np.cumsum([0] + self.activation_widths())
            slices = [g_in[:, offs[p]:offs[p + 1]] for p in range(len(self.parties))]
            tail = g_head
        for p, mdl in enumerate(self.parties):
            gu = slices[p]
            if g_u is not None and g_u[p] is not None:
                gu = gu + g_u[p]
            gp, gx = nk.mlp_backward(mdl, cache.party[p], gu)
            grads_party.append(gp)
            inputs.append(gx)
        grads = [g for gp in grads_party for g in gp] + tail
        gX = np.zeros((g_logits.shape[0], sum(x.shape[1] for x in inputs)))
        for p, gx in enumerate(inputs):
            gX[:, self.layout.columns(p)] = gx
        return grads, gX


def fuse(activations: Sequence[np.ndarray], mode: str = "shared") -> np.ndarray:
    """Server-side fusion of party activations in fixed party order."""
    if not activations:
        raise ValueError("fuse needs at least one party activation")
    n = activations[0].shape[0]
    if any(a.shape[0] != n for a in activations):
        raise ValueError("party activations disagree on batch size")
    if mode == "shared":
        out = activations[0].copy()
        for a in activations[1:]:
            out += a
        return out
    return np.hstack(activations)


# ---------------------------------------------------------------- losses

def scc_loss(logits: np.ndarray, logits_cf: np.ndarray, p: int = 1, scale: float = 1.0):
    """Mean consistency gap on logits divided by ``scale``, with gradients
    for both arguments.

    p = 1 uses the l1 norm (subgradient 0 at ties); p = 2 the squared l2
    norm, as used for regression targets. The engine passes the edit scale
    gamma, so the penalty reads as a finite-difference sensitivity along the
    intervention and its strength does not depend on how far rows move.
    """
    if logits.shape != logits_cf.shape:
        raise ValueError("logit shapes differ")
    if not scale > 0:
        raise ValueError("scale must be positive")
    n = logits.shape[0]
    diff = logits - logits_cf
    if p == 1:
        val = float(np.abs(diff).sum(1).mean())
        g = np.sign(diff) / n
    else:
        val = float((diff ** 2).sum(1).mean())
        g = 2.0 * diff / n
    return val / scale, g / scale, -g / scale


def _cons_scale(hyper: Hyper, kind: str = "generator") -> float:
    # per-unit scaling normalises the generator's partial edit; shuffled rows are taken as they are
    if kind != "generator" or not hyper.cons_per_unit or hyper.cf_scale <= 0:
        return 1.0
    return hyper.cf_scale


def total_objective(components: dict[str, float], weights: LossWeights, epoch: int,
                    method: MethodConfig | None = None) -> tuple[float, dict[str, float]]:
    """Weighted sum; returns (value, coefficient per component)."""
    method = method or MethodConfig("custom", use_cons=True, use_gen=True, use_adv=True,
                                    mask_mode="M-per-client", use_validity=True)
    need = {"cls": method.use_cls, "cons": method.use_cons, "gen": method.use_gen, "adv": method.use_adv}
    for key, on in need.items():
        if on and key not in components:
            raise ConfigError(f"method {method.name} needs the {key!r} term")
    coef = {
        "cls": 1.0 if method.use_cls else 0.0,
        "cons": weights.lam_cons(epoch) if method.use_cons else 0.0,
        "gen": weights.lam_gen if method.use_gen else 0.0,
        "adv": weights.lam_adv if method.use_adv else 0.0,
    }
    if method.use_validity:
        coef.update(v_id=weights.alpha_v, v_supp=weights.beta_v, v_leak=-weights.eta_v)
    value = sum(c * components.get(k, 0.0) for k, c in coef.items() if c != 0.0)
    return float(value), coef


# ------------------------------------------------------- counterfactuals

@dataclass
class CFMechanism:
    """How a method builds counterfactual rows for the consistency pass."""
    kind: str
    layout: VerticalLayout
    mask: mk.FeatureMask
    trainers: list[cg.GeneratorTrainer] = field(default_factory=list)
    sketch: pv.GroupSketch | None = None
    n_groups: int = 2
    gamma: float = 0.2

    def apply(self, X: np.ndarray, s: np.ndarray, context: np.ndarray | None, rng: np.random.Generator,
              targets: np.ndarray | None = None, sample: bool = False) -> np.ndarray:
        if self.kind == "shuffle":
            # mediators move toward another row's values with the same cf scale
            cols = [j for r in self.mask.parties for j in r.M]
            out = X.copy()
            if cols:
                perm = rng.permutation(len(X))
                out[:, cols] = X[:, cols] + self.gamma * (X[perm][:, cols] - X[:, cols])
            return out
        if self.kind != "generator":
            return X.copy()
        t = cg.counterfactual_targets(s, self.n_groups, rng) if targets is None else targets
        zs, zt = self.sketch.embed(s), self.sketch.embed(t)
        out = X.copy()
        for p, tr in enumerate(self.trainers):
            cols = self.layout.columns(p)
            out[:, cols] = cg.generate_cf(X[:, cols], tr.gen, zt, context, zs, rng=rng if sample else None)
        return out


def counterfactual_round(model: SplitModel, X: np.ndarray, s: np.ndarray, mech: CFMechanism,
                         rng: np.random.Generator, context: np.ndarray | None = None):
    """Fused representations for the original and counterfactual rows."""
    if context is None:
        context = model.representation(X)
    X_cf = mech.apply(X, s, context, rng)
    return model.representation(X), model.representation(X_cf)


def _local_roles(layout: VerticalLayout, mask: mk.FeatureMask, p: int, mode: str):
    cols = layout.columns(p).tolist()
    pos = {j: i for i, j in enumerate(cols)}
    roles = mask.parties[p]
    if mode == "all":
        return (), tuple(range(len(cols))), ()
    N = tuple(sorted(pos[j] for j in roles.N))
    M = tuple(sorted(pos[j] for j in roles.M))
    P = tuple(sorted(pos[j] for j in roles.P)) if mode == "M-per-client" else ()
    return N, M, P


def build_trainers(layout: VerticalLayout, mask: mk.FeatureMask, mode: str, sketch: pv.GroupSketch,
                   hyper: Hyper, ctx_dim: int, n_groups: int, rng: np.random.Generator,
                   parties: Sequence[int] | None = None, old: list | None = None) -> list[cg.GeneratorTrainer]:
    out = list(old) if old is not None else [None] * layout.m
    gw = cg.GenWeights(*hyper.gen_weights)
    for p in (range(layout.m) if parties is None else parties):
        N, M, P = _local_roles(layout, mask, p, mode)
        gen = cg.init_generator(N, M, P, sketch.dims, ctx_dim, rng, hyper.latent_dim, hyper.gen_hidden,
                                hyper.cf_scale, mask.version, proxy_passthrough=(mode == "M-per-client"),
                                edit=hyper.cf_edit)
        adv = cg.init_adversary(len(P) + len(N), rng, n_groups=n_groups)
        out[p] = cg.GeneratorTrainer(gen, adv, sketch, hyper.lr_gen, hyper.lr_adv, gw, hyper.lambda_grl,
                                     n_groups, hyper.gen_batch)
    return out


# -------------------------------------------------------- communication

@dataclass
class CommCounter:
    """Bytes at 4 bytes per value.

    feature: forward activations sent to the server (original and
    counterfactual, training and validation passes). model: parameter
    update traffic, one full update vector per optimizer step plus
    securely aggregated validity scalars. aux: activation gradients sent
    back to parties and the context broadcast to generators.
    """
    feature: int = 0
    model: int = 0
    aux: int = 0
    steps: int = 0
    per_epoch: list[tuple[int, int, int]] = field(default_factory=list)

    def activations(self, n_rows: int, widths: Sequence[int], passes: int = 1) -> None:
        self.feature += nk.BYTES_PER_VALUE * n_rows * sum(widths) * passes

    def gradients(self, n_rows: int, widths: Sequence[int], passes: int = 1) -> None:
        self.aux += nk.BYTES_PER_VALUE * n_rows * sum(widths) * passes

    def update(self, n_values: int) -> None:
        self.model += nk.BYTES_PER_VALUE * n_values
        self.steps += 1

    def close_epoch(self) -> None:
        self.per_epoch.append((self.feature, self.model, self.aux))

    def report(self) -> dict:
        return {"feature_bytes": self.feature, "model_bytes": self.model, "aux_bytes": self.aux,
                "feature_mb": self.feature / 1e6, "model_mb": self.model / 1e6, "steps": self.steps}


def comm_accounting(counter: CommCounter) -> dict:
    return counter.report()


# ------------------------------------------------------------- calibrate

def nll(logits: np.ndarray, y: np.ndarray, T: float = 1.0) -> float:
    lp = nk.log_softmax(logits / T)
    return float(-lp[np.arange(len(y)), y].mean())


def calibrate(logits: np.ndarray, y: np.ndarray, bounds: tuple[float, float] = (0.05, 20.0)) -> float:
    """Temperature minimizing validation NLL, searched over log T."""
    if len(np.unique(y)) < 2:
        warnings.warn("single-class validation set: temperature fixed at 1", RuntimeWarning, stacklevel=2)
        return 1.0
    res = minimize_scalar(lambda lt: nll(logits, y, math.exp(lt)),
                          bounds=(math.log(bounds[0]), math.log(bounds[1])), method="bounded",
                          options={"xatol": 1e-6})
    return float(math.exp(res.x))


# -------------------------------------------------------------- training

@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class TrainedModel:
    model: SplitModel
    method: MethodConfig
    weights: LossWeights
    hyper: Hyper
    mask: mk.FeatureMask
    discovery: mk.Discovery | None
    mechanism: CFMechanism
    eval_mechanism: CFMechanism
    temperature: float
    history: list[dict]
    comm: dict
    ledger: pv.BudgetLedger
    best_epoch: int
    epochs_run: int
    seed: int
    n_groups: int = 2
    refresh_events: list[dict] = field(default_factory=list)

    def logits(self, X: np.ndarray) -> np.ndarray:
        return self.model.forward(X)[0]

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.named().items()}
        for mech_name, mech in (("train", self.mechanism), ("eval", self.eval_mechanism)):
            for p, tr in enumerate(mech.trainers):
                if tr is not None:
                    out.update(tr.gen.named(f"{mech_name}.gen{p}."))
        out["temperature"] = np.array([self.temperature])
        return out


@dataclass
class _Adversaries:
    nets: list[nk.DenseParams]
    opt: list[nk.OptState]
    scope: str


def _make_adversaries(model: SplitModel, method: MethodConfig, hyper: Hyper, n_groups: int,
                      rng: np.random.Generator) -> _Adversaries | None:
    if not method.use_adv:
        return None
    if method.adv_scope == "server":
        widths = [model.head.in_dim]
    else:
        widths = model.activation_widths()
    nets = [nk.DenseParams.init([w, hyper.adv_hidden, n_groups], rng) for w in widths]
    opts = [nk.OptState.for_params(n.arrays(), hyper.lr_adv) for n in nets]
    return _Adversaries(nets, opts, method.adv_scope)


def _adversary_pass(advs: _Adversaries, reps: Sequence[np.ndarray], s: np.ndarray, lam_grl: float):
    """CE of each adversary; returns (loss sum, adversary grads, upstream grads)."""
    total, adv_grads, up = 0.0, [], []
    for net, rep in zip(advs.nets, reps):
        logits, cache = nk.mlp_forward(net, rep)
        loss, g = nk.softmax_xent(logits, s)
        ga, gin = nk.mlp_backward(net, cache, g)
        total += loss
        adv_grads.append(ga)
        up.append(nk.grl(gin, lam_grl))
    return total, adv_grads, up


def _evaluate_split(model: SplitModel, mech: CFMechanism | None, ds: Dataset, rng: np.random.Generator):
    logits, cache = model.forward(ds.X)
    y = ds.y
    acc = float((logits.argmax(1) == y).mean())
    ll = nll(logits, y)
    if mech is None:
        return acc, ll, 0.0, 0.0, logits
    X_cf = mech.apply(ds.X, ds.s, cache.h, rng, targets=cg.counterfactual_targets(ds.s, mech.n_groups, rng))
    logits_cf = model.forward(X_cf)[0]
    scg = float(np.abs(logits - logits_cf).sum(1).mean())
    fr = 100.0 * float((logits.argmax(1) != logits_cf.argmax(1)).mean())
    return acc, ll, scg, fr, logits


def _discover(X, s, layout, hyper, rng, ledger, n_groups, version=0, n_perm=0, edges=None):
    return mk.discover(X, s, layout, rng, ledger, sigma=hyper.sigma_sketch, delta=hyper.delta,
                       K=hyper.bins, S=hyper.clip_S, rho_M=hyper.rho_M, rho_P=hyper.rho_P,
                       n_groups=n_groups, mask_version=version, n_perm=n_perm, edges=edges)


def prepare_splits(ds: Dataset, spec: SplitSpec) -> Splits:
    """Split, then fit preprocessing on the training part only."""
    tr, va, te = make_splits(ds, spec)
    state = fit_preprocess(tr)
    return Splits(apply_preprocess(state, tr), apply_preprocess(state, va), apply_preprocess(state, te))


def _batches(n: int, batch_size: int | None, rng: np.random.Generator) -> list[np.ndarray]:
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def train(splits: Splits, layout: VerticalLayout, method: MethodConfig | str,
          weights: LossWeights | None = None, hyper: Hyper | None = None, seed: int = 0,
          mask: mk.FeatureMask | None = None, test_mode: bool = False) -> TrainedModel:
    """Run the three-phase schedule and return the best-validation snapshot."""
    method = method_matrix(method) if isinstance(method, str) else method
    weights = weights or LossWeights()
    hyper = hyper or Hyper()
    rs = rng_streams(seed)
    tr, va = splits.train, splits.val
    n_groups = max(tr.n_groups, int(tr.s.max()) + 1, 2)
    n_classes = max(int(tr.y.max()) + 1, 2)
    layout.validate(tr.d, min_parties=1)

    model = SplitModel.init(layout, n_classes, hyper, rs["init"])
    opt = nk.OptState.for_params(model.arrays(), hyper.lr_backbone, hyper.optimizer, hyper.weight_decay)
    widths = model.activation_widths()
    comm = CommCounter()

    # phase 1: private tables -> scores -> N/M/P; encoders are not touched
    n_tables = tr.d * (1 if n_groups <= 2 else n_groups)
    ledger = pv.BudgetLedger(1 + n_tables * (1 + hyper.max_refreshes), test_mode=test_mode)
    sketch = pv.dp_sketch_embedding(tr.s, hyper.sigma_sketch, hyper.zs_dims, rs["dp"], n_groups, ledger,
                                    hyper.delta)
    disc = None
    if mask is None:
        disc = _discover(tr.X, tr.s, layout, hyper, rs["dp"], ledger, n_groups)
        mask = disc.mask
    mask.validate(layout)
    policy = mk.RefreshPolicy(hyper.refresh_interval, hyper.hysteresis_margin, hyper.fdr_q, hyper.max_refreshes)

    ctx_dim = hyper.hidden if hyper.fuse_mode == "shared" else hyper.hidden * layout.m
    # every run scores SCG/FR under the policy counterfactual: masked per-client generators
    eval_tr = build_trainers(layout, mask, "M-per-client", sketch, hyper, ctx_dim, n_groups, rs["gen_init"])
    eval_mech = CFMechanism("generator", layout, mask, eval_tr, sketch, n_groups, hyper.cf_scale)
    train_mech = None
    if method.mask_mode == "M-per-client":
        train_mech = eval_mech
    elif method.mask_mode in ("all", "M"):
        own = build_trainers(layout, mask, method.mask_mode, sketch, hyper, ctx_dim, n_groups, rs["tgen_init"])
        train_mech = CFMechanism("generator", layout, mask, own, sketch, n_groups, hyper.cf_scale)
    elif method.mask_mode == "shuffle":
        train_mech = CFMechanism("shuffle", layout, mask, [], sketch, n_groups, hyper.cf_scale)
    gen_sets = [(eval_mech, rs["gen"], "M-per-client", rs["gen_init"])]
    if train_mech is not None and train_mech is not eval_mech and train_mech.trainers:
        gen_sets.append((train_mech, rs["tgen"], method.mask_mode, rs["tgen_init"]))
    gen_scale = weights.lam_gen
    grng_of = {id(m): r for m, r, _, _ in gen_sets}

    advs = _make_adversaries(model, method, hyper, n_groups, rs["adv_init"])
    monitor_from = weights.warmup_epochs + weights.ramp_epochs if method.use_cons else 0

    history: list[dict] = []
    best: tuple = (math.inf, -1, None, None)
    since = refreshes = 0
    refresh_events: list[dict] = []
    n = tr.n
    epoch = 0
    for epoch in range(hyper.max_epochs):
        phase = "generator" if epoch < weights.warmup_epochs else "joint"
        lam_c = weights.lam_cons(epoch) if method.use_cons else 0.0

        if epoch == 0:
            tr_blocks = model.blocks(tr.X)
        context = model.representation(tr.X)
        if train_mech is not None and train_mech.trainers:
            comm.gradients(n, [ctx_dim] * layout.m)

        comps: dict[str, float] = {}
        for b in _batches(n, hyper.batch_size, rs["batch"]):
            Xb, yb, sb = tr.X[b], tr.y[b], tr.s[b]
            dmask = model.sample_masks(len(b), rs["dropout"])
            logits, cache = model.forward(Xb, dmask)
            comm.activations(len(b), widths)
            l_cls, g_logits = nk.softmax_xent(logits, yb)
            step = {"cls": l_cls}
            g_h = g_u = None
            adv_grads = None
            if advs is not None:
                reps = [cache.h] if advs.scope == "server" else cache.u
                l_adv, adv_grads, up = _adversary_pass(advs, reps, sb, hyper.lambda_grl)
                step["adv"] = l_adv
                up = [weights.lam_adv * g for g in up]
                if advs.scope == "server":
                    g_h = up[0]
                else:
                    g_u = up
            cf_pass = None
            if method.use_cons:
                step["cons"] = 0.0
                if lam_c > 0:
                    Xcf = train_mech.apply(Xb, sb, context[b], rs["cf"], sample=hyper.sample_cf)
                    logits_cf, cache_cf = model.forward(Xcf, dmask)
                    comm.activations(len(b), widths)
                    step["cons"], g1, g2 = scc_loss(logits, logits_cf, weights.p,
                                                    _cons_scale(hyper, train_mech.kind))
                    g_logits = g_logits + lam_c * g1
                    cf_pass = (cache_cf, lam_c * g2)
            grads, _ = model.backward(cache, g_logits, g_h, g_u)
            comm.gradients(len(b), widths)
            if cf_pass is not None:
                gb, _ = model.backward(*cf_pass)
                grads = [g + c for g, c in zip(grads, gb)]
                comm.gradients(len(b), widths)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch} ({method.name}, seed {seed})")
            nk.opt_step(opt, model.arrays(), grads)
            nk.bump(*model.modules())
            comm.update(model.n_params())
            if adv_grads is not None:
                for net, o, g in zip(advs.nets, advs.opt, adv_grads):
                    nk.opt_step(o, net.arrays(), g)
                    nk.bump(net)
            for k, v in step.items():
                comps[k] = comps.get(k, 0.0) + v * len(b) / n

        # party-local generator steps
        comps["gen"] = 0.0
        gen_active = phase == "generator" or not hyper.freeze_gen
        for mech, grng, _, _ in gen_sets:
            for p, trn in enumerate(mech.trainers):
                rec = None
                for _ in range(hyper.gen_steps if gen_active else 1):
                    rec = trn.step(tr_blocks[p], tr.s, context, grng, scale=gen_scale if gen_active else 0.0)
                    if rec is None:
                        raise TrainingDiverged(f"generator {p} diverged at epoch {epoch}")
                if mech is (train_mech or eval_mech):
                    comps["gen"] += sum(rec.values())

        if method.use_validity and train_mech is not None and train_mech.trainers:
            trainers = train_mech.trainers
            idx = rs["gen"].permutation(n)[: min(hyper.gen_batch, n)]
            t = cg.counterfactual_targets(tr.s[idx], n_groups, rs["gen"])
            vecs = []
            for p, trn in enumerate(trainers):
                xp = tr_blocks[p][idx]
                xcf = cg.generate_cf(xp, trn.gen, sketch.embed(t), context[idx], sketch.embed(tr.s[idx]))
                bw, pools = trn.reference_cache(tr_blocks[p], tr.s)
                v = cg.validity_summaries(xp, xcf, trn.gen, trn.adv, tr.s[idx], t, tr_blocks[p], tr.s,
                                          bandwidth=bw, pools=pools)
                vecs.append(np.nan_to_num(v.as_vector(), nan=0.5))
            if hyper.secure_validity and len(vecs) > 1:
                summed = pv.secagg_round(vecs, rs["gen"], epoch)[1]
            else:
                summed = np.sum(vecs, axis=0)
            comm.model += nk.BYTES_PER_VALUE * sum(v.size for v in vecs)
            comps.update(v_id=float(summed[0]), v_supp=float(summed[1]), v_leak=float(summed[2]))

        objective, _ = total_objective(comps, weights, epoch, method)

        # validation under the method's own training counterfactuals
        val_mech = train_mech if lam_c > 0 else None
        acc, ll, scg, fr, _ = _evaluate_split(model, val_mech, va, np.random.default_rng([seed, epoch]))
        comm.activations(va.n, widths, passes=2 if val_mech is not None else 1)
        composite = ll + scg + fr / 100.0
        if not math.isfinite(composite):
            raise TrainingDiverged(f"non-finite validation objective at epoch {epoch}")

        # periodic mask refresh inside the joint phase
        if (phase == "joint" and refreshes < hyper.max_refreshes
                and epoch > weights.warmup_epochs
                and (epoch - weights.warmup_epochs) % hyper.refresh_interval == 0):
            mask, changed = _refresh(tr, layout, hyper, rs["refresh"], ledger, n_groups, mask, disc, policy)
            refresh_events.append({"epoch": epoch, "version": mask.version, "changed_parties": changed})
            refreshes += 1
            for mech, _, mode, init_rng in gen_sets:
                mech.mask = mask
                for trn in mech.trainers:
                    trn.gen.version = mask.version
                if changed and mode != "all":
                    mech.trainers = build_trainers(layout, mask, mode, sketch, hyper, ctx_dim, n_groups,
                                                   init_rng, parties=changed, old=mech.trainers)
                    if hyper.freeze_gen:
                        # rebuilt generators get the same budget as the warmup phase
                        for p in changed:
                            for _ in range(weights.warmup_epochs * hyper.gen_steps):
                                if mech.trainers[p].step(tr_blocks[p], tr.s, context, grng_of[id(mech)],
                                                         scale=gen_scale) is None:
                                    raise TrainingDiverged(f"generator {p} diverged after refresh")
            if train_mech is not None:
                train_mech.mask = mask

        comm.close_epoch()
        history.append({"epoch": epoch, "phase": phase, "train_loss": float(objective),
                        "val_acc": acc, "val_logloss": ll, "val_scg": scg, "val_fr": fr,
                        "composite": composite, "lam_cons": lam_c, "mask_version": mask.version,
                        "feature_bytes": comm.feature, "model_bytes": comm.model,
                        **{f"loss_{k}": float(v) for k, v in comps.items()}})

        if epoch >= monitor_from:
            if composite < best[0]:
                best = (composite, epoch, model.snapshot(), (_gen_state(gen_sets), mask))
                since = 0
            else:
                since += 1
                # generators feeding the training counterfactuals must finish warmup before a stop
                needs_gen = hyper.freeze_gen and train_mech is not None and bool(train_mech.trainers)
                if since >= hyper.patience and (epoch + 1 >= weights.warmup_epochs or not needs_gen):
                    break

    if hyper.freeze_gen and epoch + 1 < weights.warmup_epochs:
        # stopped inside warmup: the scoring generators still get their full budget
        context = model.representation(tr.X)
        for mech, grng, _, _ in gen_sets:
            for p, trn in enumerate(mech.trainers):
                for _ in range((weights.warmup_epochs - epoch - 1) * hyper.gen_steps):
                    if trn.step(tr_blocks[p], tr.s, context, grng, scale=gen_scale) is None:
                        raise TrainingDiverged(f"generator {p} diverged while finishing warmup")

    if best[2] is None:
        best = (math.inf, epoch, model.snapshot(), (_gen_state(gen_sets), mask))
    model.restore(best[2])
    states, best_mask = best[3]
    if hyper.freeze_gen and best[1] < weights.warmup_epochs:
        # the backbone peaked inside warmup; keep the generators' full warmup training
        states = _gen_state(gen_sets)
        best_mask = mask
    for (mech, _, _, _), state in zip(gen_sets, states):
        mech.trainers = state
        mech.mask = best_mask
    if train_mech is not None:
        train_mech.mask = best_mask

    T = calibrate(model.forward(va.X)[0], va.y)
    log.info("%s seed %d: %d epochs, best %d", method.name, seed, epoch + 1, best[1])
    mech = train_mech if train_mech is not None else CFMechanism("none", layout, best_mask)
    return TrainedModel(model, method, weights, hyper, best_mask, disc, mech, eval_mech, T, history,
                        comm.report(), ledger, best[1], epoch + 1, seed, n_groups, refresh_events)


def _gen_state(gen_sets) -> list[list[cg.GeneratorTrainer]]:
    """Frozen copies of every generator set (optimizer state is not needed after training)."""
    out = []
    for mech, _, _, _ in gen_sets:
        out.append([replace(t, gen=t.gen.copy(), adv=t.adv.copy(), history=[]) for t in mech.trainers])
    return out


def _refresh(tr: Dataset, layout: VerticalLayout, hyper: Hyper, rng: np.random.Generator,
             ledger: pv.BudgetLedger, n_groups: int, mask: mk.FeatureMask, disc: mk.Discovery | None,
             policy: mk.RefreshPolicy):
    new = _discover(tr.X, tr.s, layout, hyper, rng, ledger, n_groups, version=mask.version + 1,
                    n_perm=hyper.n_perm, edges=disc.edges if disc is not None else None)
    pvals = {f.feature: float(new.pvalues[f.feature]) for f in new.scores}
    out = mk.refresh_masks(mask, mk.party_scores(new.scores, layout), policy, pvals, new.mask.score_hash)
    changed = [p for p in range(layout.m) if out.parties[p] != mask.parties[p]]
    return out, changed


def train_supervised(splits: Splits, layout: VerticalLayout, hyper: Hyper | None = None, seed: int = 0):
    """Plain cross-entropy training with early stopping on validation logloss.

    Shares the engine's model, optimizer and rng-stream conventions and is
    the reference for the baseline-equivalence check.
    """
    hyper = hyper or Hyper()
    rs = rng_streams(seed)
    tr, va = splits.train, splits.val
    model = SplitModel.init(layout, max(int(tr.y.max()) + 1, 2), hyper, rs["init"])
    opt = nk.OptState.for_params(model.arrays(), hyper.lr_backbone, hyper.optimizer, hyper.weight_decay)
    best, best_snap, since = math.inf, model.snapshot(), 0
    for epoch in range(hyper.max_epochs):
        for b in _batches(tr.n, hyper.batch_size, rs["batch"]):
            dmask = model.sample_masks(len(b), rs["dropout"])
            logits, cache = model.forward(tr.X[b], dmask)
            _, g = nk.softmax_xent(logits, tr.y[b])
            grads, _ = model.backward(cache, g)
            nk.opt_step(opt, model.arrays(), grads)
            nk.bump(*model.modules())
        ll = nll(model.forward(va.X)[0], va.y)
        if ll < best:
            best, best_snap, since = ll, model.snapshot(), 0
        else:
            since += 1
            if since >= hyper.patience:
                break
    model.restore(best_snap)
    return model
