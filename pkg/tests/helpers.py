"""Gradient checks shared by the engine tests and the acceptance suite."""

import numpy as np

from sccvfl import data
from sccvfl import engine as en
from sccvfl import generator as cg
from sccvfl import numkit as nk
from sccvfl import privacy as pv

LAYOUT = data.VerticalLayout((("A", (0, 1, 3)), ("B", (2, 4, 5))))


def _jitter_biases(modules, rng):
    for mdl in modules:
        for b in mdl.biases:
            b[:] = rng.normal(scale=0.3, size=b.shape)


def objective_check(mode: str, seed: int, n: int = 20) -> nk.GradReport:
    """Full training objective on a toy batch: cross-entropy, consistency on a
    counterfactual pass and a GRL adversary on the fused representation, with
    dropout masks pinned. Gradients are assembled exactly as the engine does.
    """
    rng = np.random.default_rng(seed)
    hyper = en.Hyper(hidden=6, dropout=0.2, fuse_mode=mode)
    model = en.SplitModel.init(LAYOUT, 3, hyper, rng)
    _jitter_biases(model.modules(), rng)
    X = rng.normal(size=(n, 6))
    Xcf = X.copy()
    Xcf[:, [1, 2]] += rng.normal(scale=0.5, size=(n, 2))
    y = rng.integers(0, 3, n)
    s = rng.integers(0, 2, n)
    masks = model.sample_masks(n, rng)
    adv = nk.DenseParams.init([model.head.in_dim, 5, 2], rng)
    _jitter_biases([adv], rng)
    lam_c, lam_adv, lam_grl, scale = 0.8, 0.3, 0.7, 0.2

    def loss():
        logits, cache = model.forward(X, masks)
        logits_cf, _ = model.forward(Xcf, masks)
        a_logits, _ = nk.mlp_forward(adv, cache.h)
        # GRL: the encoder minimizes -lam_grl * adversary loss
        return (nk.softmax_xent(logits, y)[0]
                + lam_c * en.scc_loss(logits, logits_cf, 1, scale)[0]
                - lam_adv * lam_grl * nk.softmax_xent(a_logits, s)[0])

    logits, cache = model.forward(X, masks)
    logits_cf, cache_cf = model.forward(Xcf, masks)
    _, g_logits = nk.softmax_xent(logits, y)
    _, g1, g2 = en.scc_loss(logits, logits_cf, 1, scale)
    advs = en._Adversaries([adv], [nk.OptState.for_params(adv.arrays(), 0.01)], "server")
    _, _, up = en._adversary_pass(advs, [cache.h], s, lam_grl)
    grads, _ = model.backward(cache, g_logits + lam_c * g1, lam_adv * up[0])
    gb, _ = model.backward(cache_cf, lam_c * g2)
    grads = [g + c for g, c in zip(grads, gb)]
    return nk.finite_diff_check(loss, model.arrays(), grads, rng=np.random.default_rng(seed))


def adversary_check(seed: int) -> nk.GradReport:
    rng = np.random.default_rng(seed)
    adv = nk.DenseParams.init([6, 5, 2], rng)
    _jitter_biases([adv], rng)
    h = rng.normal(size=(20, 6))
    s = rng.integers(0, 2, 20)
    advs = en._Adversaries([adv], [], "server")
    _, grads, _ = en._adversary_pass(advs, [h], s, 1.0)

    def loss():
        return nk.softmax_xent(nk.mlp_forward(adv, h)[0], s)[0]

    return nk.finite_diff_check(loss, adv.arrays(), grads[0])


def generator_check(seed: int, edit: str = "abduct") -> nk.GradReport:
    rng = np.random.default_rng(seed)
    n = 20
    x = rng.normal(size=(n, 6))
    s = rng.integers(0, 2, n)
    s[:2] = [0, 1]
    sk = pv.dp_sketch_embedding(s, 0.02, 2, rng, 2)
    gen = cg.init_generator((0, 1), (2, 3, 4, 5), (5,), 2, 3, rng, 4, 8, 0.3, edit=edit)
    _jitter_biases([gen.encoder, gen.decoder], rng)
    adv = cg.init_adversary(3, rng)
    ctx = rng.normal(size=(n, 3))
    eps = rng.normal(size=(n, 4))
    w = cg.GenWeights(1.0, 1.0, 1.0, 1.0, 0.7)
    bw = nk.median_bandwidth(x[:, list(gen.editable)])
    res = cg.gen_loss(x, s, 1 - s, gen, adv, sk, ctx, eps, w, bandwidth=bw)
    return nk.finite_diff_check(lambda: cg.gen_loss(x, s, 1 - s, gen, adv, sk, ctx, eps, w, bandwidth=bw).total,
                                gen.arrays(), res.gen_grads, rng=np.random.default_rng(seed))
