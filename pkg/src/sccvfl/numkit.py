"""Dense numerical kernel: MLP blocks with hand-written backward passes,
Adam/AdamW, gradient reversal, RBF kernels, HSIC, MMD, a finite-difference
oracle and a flat binary snapshot format.

Everything runs in float64. Dropout uses inverted scaling, so evaluation
mode needs no rescaling.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

BYTES_PER_VALUE = 4
SNAPSHOT_MAGIC = b"SCCVFLT1"


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    pass


class OracleError(RuntimeError):
    pass


# ------------------------------------------------------------------ layers

@dataclass
class DenseParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    acts: list[str]
    dropout: list[float]
    version: int = 0

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.acts) == len(self.dropout)):
            raise ShapeError("weights, biases, acts and dropout must have one entry per layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise ShapeError(f"layer {i}: bias width {b.shape[0]} != output width {W.shape[1]}")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ShapeError(f"layer {i}: input width {W.shape[0]} does not chain")
        for a in self.acts:
            if a not in ("relu", "linear"):
                raise ValueError(f"unknown activation {a!r}")
        for r in self.dropout:
            if not 0.0 <= r < 1.0:
                raise ValueError("dropout rate must lie in [0, 1)")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: np.random.Generator, acts: Sequence[str] | None = None,
             dropout: float | Sequence[float] = 0.0) -> "DenseParams":
        """He-uniform weights for relu layers, Glorot-uniform for linear ones."""
        n_layers = len(sizes) - 1
        if acts is None:
            acts = ["relu"] * (n_layers - 1) + ["linear"]
        if np.isscalar(dropout):
            dropout = [float(dropout)] * (n_layers - 1) + [0.0]
        weights, biases = [], []
        for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], acts):
            limit = np.sqrt(6.0 / fan_in) if act == "relu" else np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, list(acts), list(dropout))

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def named(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}W{i}"] = W
            out[f"{prefix}b{i}"] = b
        return out

    def copy(self) -> "DenseParams":
        return DenseParams([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                           list(self.acts), list(self.dropout))

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())


@dataclass
class MLPCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    masks: list[np.ndarray | None]
    version: int
    owner: int


def dropout_masks(params: DenseParams, n: int, rng: np.random.Generator) -> list[np.ndarray | None]:
    masks = []
    for W, rate in zip(params.weights, params.dropout):
        if rate > 0.0:
            keep = rng.random((n, W.shape[1])) >= rate
            masks.append(keep / (1.0 - rate))
        else:
            masks.append(None)
    return masks


def mlp_forward(params: DenseParams, X: np.ndarray, train_mode: bool = False,
                rng: np.random.Generator | None = None,
                masks: list[np.ndarray | None] | None = None) -> tuple[np.ndarray, MLPCache]:
    """Forward pass. Dropout is applied after each activation in train mode.

    ``masks`` lets a caller replay the dropout pattern of an earlier pass.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.in_dim:
        raise ShapeError(f"input width {X.shape[-1]} != expected {params.in_dim}")
    if train_mode and masks is None and any(r > 0 for r in params.dropout):
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        masks = dropout_masks(params, X.shape[0], rng)
    if not train_mode:
        masks = [None] * len(params.weights)
    elif masks is None:
        masks = [None] * len(params.weights)
    inputs, pre = [], []
    a = X
    for W, b, act, mask in zip(params.weights, params.biases, params.acts, masks):
        inputs.append(a)
        z = a @ W + b
        pre.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z
        if mask is not None:
            a = a * mask
    return a, MLPCache(inputs, pre, list(masks), params.version, id(params))


def mlp_backward(params: DenseParams, cache: MLPCache, grad_out: np.ndarray):
    """Return (per-array gradients in ``params.arrays()`` order, input gradient)."""
    if cache.owner != id(params) or cache.version != params.version:
        raise StaleCacheError("cache does not belong to the current parameter state")
    grads: list[np.ndarray] = [None] * (2 * len(params.weights))  # type: ignore[list-item]
    g = np.asarray(grad_out, dtype=float)
    for i in reversed(range(len(params.weights))):
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        if params.acts[i] == "relu":
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = cache.inputs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return grads, g


# -------------------------------------------------------------- losses

def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=float)
    y = np.asarray(y, dtype=int)
    n, k = logits.shape
    if y.shape != (n,):
        raise ShapeError("labels must be a vector with one entry per row")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError("label index out of range")
    lp = log_softmax(logits)
    loss = -lp[np.arange(n), y].mean()
    grad = np.exp(lp)
    grad[np.arange(n), y] -= 1.0
    return float(loss), grad / n


def grl(grad: np.ndarray, lambda_grl: float) -> np.ndarray:
    """Backward rule of the gradient reversal layer (forward is identity)."""
    if lambda_grl < 0:
        raise ValueError("lambda_grl must be nonnegative")
    return -lambda_grl * np.asarray(grad)


# ----------------------------------------------------------- optimizers

@dataclass
class OptState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    variant: str = "adam"

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], lr: float, variant: str = "adam",
                   weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> "OptState":
        if variant not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer variant {variant!r}")
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                   0, lr, tuple(betas), eps, weight_decay, variant)


def opt_step(opt: OptState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
    """In-place Adam / AdamW update. Plain Adam folds weight decay into the gradient."""
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if opt.variant == "adam" and opt.weight_decay:
            g = g + opt.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if opt.variant == "adamw" and opt.weight_decay:
            p -= opt.lr * opt.weight_decay * p
        p -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def bump(*models: DenseParams) -> None:
    """Mark parameter containers as modified so old caches become stale."""
    for mdl in models:
        mdl.version += 1


# -------------------------------------------------------------- kernels

@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    bandwidth: float | str = "median"

    def __post_init__(self):
        if self.family != "rbf":
            raise ValueError("only the rbf kernel is implemented")
        if not isinstance(self.bandwidth, str) and not self.bandwidth > 0:
            raise ValueError("explicit bandwidth must be positive")


def _as2d(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def sq_dists(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    d = (X * X).sum(1)[:, None] + (Y * Y).sum(1)[None, :] - 2.0 * X @ Y.T
    return np.maximum(d, 0.0)


def median_bandwidth(X: np.ndarray, Y: np.ndarray | None = None) -> float:
    P = _as2d(X) if Y is None else np.vstack([_as2d(X), _as2d(Y)])
    if len(P) == 0:
        raise ValueError("median heuristic needs a nonempty sample")
    d = np.sqrt(sq_dists(P, P)[np.triu_indices(len(P), 1)])
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def resolve_bandwidth(spec: KernelSpec, X, Y=None) -> float:
    return median_bandwidth(X, Y) if isinstance(spec.bandwidth, str) else float(spec.bandwidth)


def rbf_gram(X, Y=None, spec: KernelSpec = KernelSpec(), bandwidth: float | None = None) -> np.ndarray:
    X = _as2d(X)
    Y = X if Y is None else _as2d(Y)
    if len(X) == 0 or len(Y) == 0:
        raise ValueError("rbf_gram needs nonempty inputs")
    sig = bandwidth if bandwidth is not None else resolve_bandwidth(spec, X, None if Y is X else Y)
    return np.exp(-sq_dists(X, Y) / (2.0 * sig * sig))


def center(K: np.ndarray) -> np.ndarray:
    return K - K.mean(0, keepdims=True) - K.mean(1, keepdims=True) + K.mean()


def hsic(K: np.ndarray, L: np.ndarray) -> float:
    K = np.asarray(K, dtype=float)
    L = np.asarray(L, dtype=float)
    if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape != L.shape:
        raise ShapeError("hsic needs two square matrices of the same size")
    n = K.shape[0]
    if n < 2:
        raise ShapeError("hsic needs n >= 2")
    # trace(KHLH) = sum((HKH) * L) for symmetric L
    return max(float((center(K) * L).sum()) / (n - 1) ** 2, 0.0)


def mmd2(X, Y, spec: KernelSpec = KernelSpec(), biased: bool = False,
         bandwidth: float | None = None) -> float:
    X, Y = _as2d(X), _as2d(Y)
    if len(X) < 2 or len(Y) < 2:
        raise ValueError("mmd2 needs at least two rows per sample")
    sig = bandwidth if bandwidth is not None else resolve_bandwidth(spec, X, Y)
    Kxx = rbf_gram(X, X, bandwidth=sig)
    Kyy = rbf_gram(Y, Y, bandwidth=sig)
    Kxy = rbf_gram(X, Y, bandwidth=sig)
    m, n = len(X), len(Y)
    if biased:
        return max(float(Kxx.mean() + Kyy.mean() - 2.0 * Kxy.mean()), 0.0)
    xx = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    yy = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(xx + yy - 2.0 * Kxy.mean())


def mmd2_biased_grad(X, Y, bandwidth: float, kyy_mean: float | None = None) -> tuple[float, np.ndarray]:
    """Biased MMD² and its gradient with respect to X (bandwidth held fixed).

    ``kyy_mean`` may carry a precomputed mean of the Y-Y gram matrix.
    """
    X, Y = _as2d(X), _as2d(Y)
    m, n = len(X), len(Y)
    s2 = bandwidth * bandwidth
    Kxx = rbf_gram(X, X, bandwidth=bandwidth)
    Kxy = rbf_gram(X, Y, bandwidth=bandwidth)
    if kyy_mean is None:
        kyy_mean = float(rbf_gram(Y, Y, bandwidth=bandwidth).mean())
    val = Kxx.mean() + kyy_mean - 2.0 * Kxy.mean()
    # d k(x_i, z) / d x_i = -k (x_i - z) / s2
    gxx = -(Kxx.sum(1)[:, None] * X - Kxx @ X) / s2
    gxy = -(Kxy.sum(1)[:, None] * X - Kxy @ Y) / s2
    grad = 2.0 * gxx / (m * m) - 2.0 * gxy / (m * n)
    return float(val), grad


# ------------------------------------------------------ gradient oracle

@dataclass
class GradReport:
    max_rel_error: float
    worst: tuple[int, int] | None
    checked: int
    per_tensor: list[float] = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                      grads: Sequence[np.ndarray], step: float = 1e-5, max_coords: int = 200,
                      rng: np.random.Generator | None = None, floor: float = 1e-6) -> GradReport:
    """Compare analytic ``grads`` against central differences of ``loss_fn``.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in
    place and restored). Relative error is |a-n| / max(|a|, |n|, floor).
    """
    if not step > 0:
        raise ValueError("finite-difference step must be positive")
    rng = rng or np.random.default_rng(0)
    worst, where, count, per = 0.0, None, 0, []
    for t, (p, g) in enumerate(zip(params, grads)):
        flat_g = np.asarray(g).reshape(-1)
        idx = np.arange(p.size)
        if idx.size > max_coords:
            idx = rng.choice(idx, size=max_coords, replace=False)
        tensor_worst = 0.0
        for i in idx:
            # index in place; reshape(-1) would copy a non C-contiguous array
            at = np.unravel_index(i, p.shape)
            old = p[at]
            p[at] = old + step
            up = loss_fn()
            p[at] = old - step
            down = loss_fn()
            p[at] = old
            if not (np.isfinite(up) and np.isfinite(down)):
                raise OracleError(f"non-finite loss while probing tensor {t}, coordinate {i}")
            num = (up - down) / (2.0 * step)
            ana = flat_g[i]
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            count += 1
            if rel > tensor_worst:
                tensor_worst = rel
            if rel > worst:
                worst, where = rel, (t, int(i))
        per.append(tensor_worst)
    return GradReport(worst, where, count, per)


# ------------------------------------------------------------ snapshots

def save_snapshot(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Flat binary layout, little-endian throughout:

    magic (8 bytes) | uint32 count | per tensor: uint16 name length, utf-8 name,
    uint8 ndim, ndim x uint64 shape, row-major float64 values.
    """
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load_snapshot(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file (bad magic)")
    pos = 8
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return out
