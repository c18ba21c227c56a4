"""Party-local masked counterfactual generators.

A conditional VAE per party. The encoder reads (x_N, x_M, z_s) and emits a
Gaussian latent; the decoder reads (latent, x_N, c, z_target) and proposes
mediator values. By default the edit keeps each row's own residual: the
counterfactual is x_M + gamma * (decoded(z_target) - decoded(z_s)), both
decodes sharing the same latent. The "blend" form x_M + gamma * (decoded -
x_M) is kept as an option. Non-descendants and proxies are copied.

A per-party adversary a(x_P, x_N) estimates the probability of the true
group and is trained through a gradient reversal layer.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from .privacy import GroupSketch

LOG2PI = math.log(2.0 * math.pi)


class VersionMismatch(RuntimeError):
    pass


@dataclass
class GeneratorParams:
    encoder: nk.DenseParams
    decoder: nk.DenseParams
    N: tuple[int, ...]
    M: tuple[int, ...]
    P: tuple[int, ...]
    gamma: float = 0.2
    latent_dim: int = 8
    version: int = 0
    proxy_passthrough: bool = True
    edit: str = "abduct"

    def __post_init__(self):
        if self.edit not in ("abduct", "blend"):
            raise ValueError(f"unknown edit form {self.edit!r}")
        if self.gamma < 0:
            raise ValueError("cf scale must be nonnegative")
        if not set(self.P) <= set(self.M):
            raise ValueError("proxies must be a subset of the mediators")
        if self.decoder.out_dim != max(len(self.M), 1):
            raise ValueError("decoder width must equal |M|")

    @property
    def editable(self) -> tuple[int, ...]:
        if not self.proxy_passthrough:
            return self.M
        return tuple(j for j in self.M if j not in set(self.P))

    @property
    def edit_in_M(self) -> np.ndarray:
        pos = {j: i for i, j in enumerate(self.M)}
        return np.array([pos[j] for j in self.editable], dtype=int)

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays()

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {**self.encoder.named(prefix + "enc."), **self.decoder.named(prefix + "dec.")}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.encoder.copy(), self.decoder.copy(), self.N, self.M, self.P,
                               self.gamma, self.latent_dim, self.version, self.proxy_passthrough, self.edit)


def init_generator(N: Sequence[int], M: Sequence[int], P: Sequence[int], zs_dims: int, ctx_dim: int,
                   rng: np.random.Generator, latent_dim: int = 8, hidden: int = 32, gamma: float = 0.2,
                   version: int = 0, proxy_passthrough: bool = True, edit: str = "abduct") -> GeneratorParams:
    """``N``, ``M``, ``P`` are positions inside the party's own column block."""
    if not M:
        warnings.warn("empty mediator set: generator is a pass-through", RuntimeWarning, stacklevel=2)
    n, m = len(N), len(M)
    enc = nk.DenseParams.init([n + m + zs_dims, hidden, 2 * latent_dim], rng)
    dec = nk.DenseParams.init([latent_dim + n + ctx_dim + zs_dims, hidden, max(m, 1)], rng)
    return GeneratorParams(enc, dec, tuple(N), tuple(M), tuple(P), gamma, latent_dim, version,
                           proxy_passthrough, edit)


def init_adversary(n_inputs: int, rng: np.random.Generator, hidden: int = 16,
                   n_groups: int = 2) -> nk.DenseParams:
    return nk.DenseParams.init([max(n_inputs, 1), hidden, n_groups], rng)


def adversary_inputs(x_party: np.ndarray, gen: GeneratorParams) -> np.ndarray:
    cols = list(gen.P) + list(gen.N)
    if not cols:
        return np.zeros((len(x_party), 1))
    return x_party[:, cols]


# ------------------------------------------------------------- forward

def _encode(gen: GeneratorParams, x: np.ndarray, zs: np.ndarray):
    e_in = np.hstack([x[:, list(gen.N)], x[:, list(gen.M)], zs])
    out, cache = nk.mlp_forward(gen.encoder, e_in)
    L = gen.latent_dim
    return out[:, :L], out[:, L:], cache


def _decode(gen: GeneratorParams, lat, x, ctx, zt):
    d_in = np.hstack([lat, x[:, list(gen.N)], ctx, zt])
    return nk.mlp_forward(gen.decoder, d_in)


def _blend(gen: GeneratorParams, x: np.ndarray, dec: np.ndarray, rec: np.ndarray | None = None,
           scale: float | None = None) -> np.ndarray:
    out = x.copy()
    E = list(gen.editable)
    scale = gen.gamma if scale is None else scale
    if E and scale != 0.0:
        base = x[:, E] if gen.edit == "blend" else rec[:, gen.edit_in_M]
        out[:, E] = x[:, E] + scale * (dec[:, gen.edit_in_M] - base)
    return out


def generate_cf(x_party: np.ndarray, gen: GeneratorParams, z_target: np.ndarray, context: np.ndarray,
                z_source: np.ndarray, mask_version: int | None = None,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Counterfactual party rows; posterior-mean latent unless ``rng`` asks for a sample."""
    if mask_version is not None and mask_version != gen.version:
        raise VersionMismatch(f"generator trained for mask v{gen.version}, asked for v{mask_version}")
    x = np.asarray(x_party, float)
    if not gen.editable or gen.gamma == 0.0:
        return x.copy()
    mu, logvar, _ = _encode(gen, x, z_source)
    lat = mu if rng is None else mu + np.exp(0.5 * logvar) * rng.normal(size=mu.shape)
    dec, _ = _decode(gen, lat, x, context, z_target)
    rec = _decode(gen, lat, x, context, z_source)[0] if gen.edit == "abduct" else None
    return _blend(gen, x, dec, rec)


def counterfactual_targets(s: np.ndarray, n_groups: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Flip binary groups; otherwise draw a uniformly random other group."""
    s = np.asarray(s, int)
    if n_groups <= 2:
        return 1 - s
    if rng is None:
        raise ValueError("multi-group targets need an rng")
    shift = rng.integers(1, n_groups, size=len(s))
    return (s + shift) % n_groups


# ----------------------------------------------------------------- loss

@dataclass
class GenWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma_w: float = 1.0
    eta: float = 1.0
    # decoder noise scale in standardized units; 1.0 lets the latent collapse
    recon_sigma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma_w, self.eta) < 0:
            raise ValueError("generator loss weights must be nonnegative")
        if not self.recon_sigma > 0:
            raise ValueError("recon_sigma must be positive")


@dataclass
class GenLossResult:
    components: dict[str, float]
    gen_grads: list[np.ndarray]
    adv_grads: list[np.ndarray]
    adv_input_grad: np.ndarray
    x_cf: np.ndarray

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))


def support_pools(gen: GeneratorParams, ref: np.ndarray, s_ref: np.ndarray, bandwidth: float) -> dict:
    """Per-group reference rows on the editable coordinates and their gram means."""
    E = list(gen.editable)
    out = {}
    for g in np.unique(s_ref):
        pool = ref[s_ref == g][:, E]
        if len(pool) >= 2:
            out[int(g)] = (pool, float(nk.rbf_gram(pool, bandwidth=bandwidth).mean()))
    return out


def _support(gen, cf, ref, t, s_ref, bandwidth, pools=None):
    """Weighted biased MMD² per target group, and its gradient wrt cf[:, E]."""
    E = list(gen.editable)
    val = 0.0
    grad = np.zeros((len(cf), len(E)))
    n = len(cf)
    if pools is None:
        pools = support_pools(gen, ref, s_ref, bandwidth)
    for g in np.unique(t):
        rows = np.flatnonzero(t == g)
        if len(rows) < 2 or int(g) not in pools:
            continue
        pool, kyy = pools[int(g)]
        v, gr = nk.mmd2_biased_grad(cf[rows][:, E], pool, bandwidth, kyy)
        w = len(rows) / n
        val += w * v
        grad[rows] += w * gr
    return val, grad


def leak_probs(adv: nk.DenseParams, u: np.ndarray, s: np.ndarray):
    logits, cache = nk.mlp_forward(adv, u)
    p = nk.softmax(logits)
    a = p[np.arange(len(s)), s]
    return a, p, cache


def gen_loss(x_party: np.ndarray, s: np.ndarray, s_target: np.ndarray, gen: GeneratorParams,
             adv: nk.DenseParams, sketch: GroupSketch, context: np.ndarray, eps: np.ndarray,
             weights: GenWeights = GenWeights(), reference: np.ndarray | None = None,
             s_reference: np.ndarray | None = None, bandwidth: float | None = None,
             lambda_grl: float = 1.0, pools: dict | None = None) -> GenLossResult:
    """Loss components and gradients with the latent noise ``eps`` pinned.

    Components: identity (alpha), likelihood = beta * (Gaussian NLL + KL),
    support = gamma_w * MMD² between the full-strength edit (gamma = 1) and
    real rows of the target group, and leak = -eta * mean log(1 - a) with
    a the adversary's probability of the true group. The adversary is fitted by cross-entropy on s (``adv_grads``);
    ``adv_input_grad`` is the leak-term gradient as it arrives upstream of
    the gradient reversal layer.
    """
    x = np.asarray(x_party, float)
    s = np.asarray(s, int)
    t = np.asarray(s_target, int)
    n = len(x)
    ref = x if reference is None else reference
    s_ref = s if s_reference is None else s_reference
    zs, zt = sketch.embed(s), sketch.embed(t)
    comps = {"identity": 0.0, "likelihood": 0.0, "support": 0.0, "leak": 0.0}
    genc = [np.zeros_like(a) for a in gen.encoder.arrays()]
    gdec = [np.zeros_like(a) for a in gen.decoder.arrays()]
    x_cf = x.copy()

    if gen.M:
        mu, logvar, ecache = _encode(gen, x, zs)
        std = np.exp(0.5 * logvar)
        lat = mu + std * eps
        xM = x[:, list(gen.M)]
        rec, rcache = _decode(gen, lat, x, context, zs)
        dec, ccache = _decode(gen, lat, x, context, zt)
        x_cf = _blend(gen, x, dec, rec)

        resid = xM - rec
        var = weights.recon_sigma ** 2
        nll = (0.5 * (resid ** 2).sum(1).mean() / var
               + len(gen.M) * (0.5 * LOG2PI + math.log(weights.recon_sigma)))
        kl = (-0.5 * (1.0 + logvar - mu ** 2 - np.exp(logvar)).sum(1)).mean()
        comps["likelihood"] = weights.beta * (nll + kl)
        g_rec = -weights.beta * resid / (n * var)
        g_dec = np.zeros_like(dec)
        if gen.editable and weights.gamma_w > 0:
            E = list(gen.editable)
            bw = bandwidth if bandwidth is not None else nk.median_bandwidth(ref[:, E])
            # support is matched by the full-strength edit; gamma only sets how much of it is applied
            x_full = _blend(gen, x, dec, rec, scale=1.0)
            sup, g_cf = _support(gen, x_full, ref, t, s_ref, bw, pools)
            comps["support"] = weights.gamma_w * sup
            g_dec[:, gen.edit_in_M] = weights.gamma_w * g_cf
            if gen.edit == "abduct":
                g_rec[:, gen.edit_in_M] -= weights.gamma_w * g_cf
        gr, gin_r = nk.mlp_backward(gen.decoder, rcache, g_rec)
        gc, gin_c = nk.mlp_backward(gen.decoder, ccache, g_dec)
        gdec = [a + b for a, b in zip(gr, gc)]
        L = gen.latent_dim
        g_lat = gin_r[:, :L] + gin_c[:, :L]
        g_mu = g_lat + weights.beta * mu / n
        g_lv = g_lat * eps * 0.5 * std + weights.beta * 0.5 * (np.exp(logvar) - 1.0) / n
        genc, _ = nk.mlp_backward(gen.encoder, ecache, np.hstack([g_mu, g_lv]))

    u = adversary_inputs(x_cf, gen)
    a, p, acache = leak_probs(adv, u, s)
    one_minus = np.clip(1.0 - a, 1e-300, None)
    comps["leak"] = float(-weights.eta * np.log(one_minus).mean())
    # dT/dlogit_k = eta/n * a (1[k=s] - p_k) / (1 - a)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), s] = 1.0
    dT = weights.eta / n * (a / one_minus)[:, None] * (onehot - p)
    _, g_u_T = nk.mlp_backward(adv, acache, dT)
    # the adversary itself fits s by cross-entropy (bounded, unlike T)
    _, g_ce = nk.softmax_xent(acache.pre[-1], s)
    adv_grads, _ = nk.mlp_backward(adv, acache, weights.eta * g_ce)
    # upstream sees grl(-dT/du) = lambda * dT/du; inputs here are copies, so it stops
    adv_input_grad = nk.grl(-g_u_T, lambda_grl)
    return GenLossResult(comps, genc + gdec, adv_grads, adv_input_grad, x_cf)


# ----------------------------------------------------------- summaries

@dataclass
class ValiditySummary:
    v_id: float
    v_supp: float
    v_leak: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.v_id, self.v_supp, self.v_leak])


def balanced_accuracy(pred: np.ndarray, s: np.ndarray) -> float | None:
    groups = np.unique(s)
    if len(groups) < 2:
        return None
    return float(np.mean([np.mean(pred[s == g] == g) for g in groups]))


def adversary_eval(adv: nk.DenseParams, u: np.ndarray, s: np.ndarray) -> float | None:
    logits, _ = nk.mlp_forward(adv, u)
    return balanced_accuracy(logits.argmax(1), np.asarray(s, int))


def validity_summaries(x_party: np.ndarray, x_cf: np.ndarray, gen: GeneratorParams, adv: nk.DenseParams,
                       s: np.ndarray, s_target: np.ndarray, reference: np.ndarray | None = None,
                       s_reference: np.ndarray | None = None, bandwidth: float | None = None,
                       pools: dict | None = None) -> ValiditySummary:
    """v_id is the mean over rows and N coordinates of the squared change."""
    N = list(gen.N)
    v_id = float(np.mean((x_cf[:, N] - x_party[:, N]) ** 2)) if N else 0.0
    v_supp = 0.0
    E = list(gen.editable)
    ref = x_party if reference is None else reference
    s_ref = s if s_reference is None else s_reference
    if E:
        bw = bandwidth if bandwidth is not None else nk.median_bandwidth(ref[:, E])
        v_supp, _ = _support(gen, x_cf, ref, np.asarray(s_target, int), s_ref, bw, pools)
    leak = adversary_eval(adv, adversary_inputs(x_cf, gen), s)
    return ValiditySummary(v_id, float(v_supp), float("nan") if leak is None else leak)


# -------------------------------------------------------------- training

@dataclass
class GeneratorTrainer:
    """Generator, its adversary and their optimizer states for one party."""
    gen: GeneratorParams
    adv: nk.DenseParams
    sketch: GroupSketch
    lr_gen: float = 0.010
    lr_adv: float = 0.005
    weights: GenWeights = field(default_factory=GenWeights)
    lambda_grl: float = 1.0
    n_groups: int = 2
    batch_size: int = 256
    opt_gen: nk.OptState | None = None
    opt_adv: nk.OptState | None = None
    history: list[dict] = field(default_factory=list)
    _ref: tuple | None = field(default=None, repr=False)

    def reference_cache(self, x: np.ndarray, s: np.ndarray) -> tuple[float | None, dict | None]:
        """Bandwidth and per-group pools for a fixed reference sample, computed once."""
        key = (id(x), x.shape, float(x.sum()), tuple(self.gen.editable))
        if self._ref is None or self._ref[0] != key:
            E = list(self.gen.editable)
            if not E:
                self._ref = (key, None, None)
            else:
                bw = nk.median_bandwidth(x[:, E])
                self._ref = (key, bw, support_pools(self.gen, x, np.asarray(s, int), bw))
        return self._ref[1], self._ref[2]

    def __post_init__(self):
        if self.opt_gen is None:
            self.opt_gen = nk.OptState.for_params(self.gen.arrays(), self.lr_gen)
        if self.opt_adv is None:
            self.opt_adv = nk.OptState.for_params(self.adv.arrays(), self.lr_adv)

    def step(self, x: np.ndarray, s: np.ndarray, context: np.ndarray, rng: np.random.Generator,
             scale: float = 1.0) -> dict[str, float] | None:
        """One joint generator/adversary step on a random minibatch.

        ``scale`` multiplies the generator gradient (the outer loss weight);
        a zero scale leaves the generator untouched. Returns None and keeps
        the previous parameters if the loss turns non-finite.
        """
        n = len(x)
        idx = rng.permutation(n)[: min(self.batch_size, n)]
        t = counterfactual_targets(s[idx], self.n_groups, rng)
        eps = rng.normal(size=(len(idx), self.gen.latent_dim))
        bw, pools = self.reference_cache(x, s)
        res = gen_loss(x[idx], s[idx], t, self.gen, self.adv, self.sketch, context[idx], eps,
                       self.weights, reference=x, s_reference=s, bandwidth=bw,
                       lambda_grl=self.lambda_grl, pools=pools)
        if not np.isfinite(res.total):
            return None
        if scale > 0 and self.gen.M:
            before = [a.copy() for a in self.gen.arrays()]
            nk.opt_step(self.opt_gen, self.gen.arrays(), [scale * g for g in res.gen_grads])
            if not all(np.all(np.isfinite(a)) for a in self.gen.arrays()):
                for a, b in zip(self.gen.arrays(), before):
                    a[...] = b
                return None
            nk.bump(self.gen.encoder, self.gen.decoder)
        if self.weights.eta > 0:
            nk.opt_step(self.opt_adv, self.adv.arrays(), res.adv_grads)
            nk.bump(self.adv)
        rec = dict(res.components)
        self.history.append(rec)
        return rec


def train_generator(x_party: np.ndarray, s: np.ndarray, gen: GeneratorParams, adv: nk.DenseParams,
                    sketch: GroupSketch, epochs: int, rng: np.random.Generator,
                    context: np.ndarray | None = None, weights: GenWeights = GenWeights(),
                    lr_gen: float = 0.010, lr_adv: float = 0.005, batch_size: int = 256,
                    n_groups: int = 2) -> GeneratorTrainer:
    """Standalone party-local training loop (one step per epoch)."""
    ctx = np.zeros((len(x_party), 0)) if context is None else context
    tr = GeneratorTrainer(gen, adv, sketch, lr_gen, lr_adv, weights, n_groups=n_groups,
                          batch_size=batch_size)
    for _ in range(epochs):
        if tr.step(x_party, s, ctx, rng) is None:
            warnings.warn("generator loss became non-finite; kept the last finite state",
                          RuntimeWarning, stacklevel=2)
            break
    return tr
