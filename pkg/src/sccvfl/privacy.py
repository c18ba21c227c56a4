"""Private sketch release for feature-role discovery.

Per-feature 2×K (group × bin) tables are clipped to an l2 bound and
released through the Gaussian mechanism. A :class:`BudgetLedger` caps the
number of releases and keeps an append-only audit trail. Secure
aggregation is simulated in-process with pairwise masks that cancel
exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# fixed-point scale for secure aggregation: values are carried as int64 in
# units of 2**-FRAC_BITS inside the ring Z / 2**64
FRAC_BITS = 40


class BudgetExhausted(RuntimeError):
    def __init__(self, ledger: "BudgetLedger"):
        super().__init__(f"release refused: ledger already holds {len(ledger.records)} of "
                         f"{ledger.max_releases} permitted releases")
        self.ledger = ledger


class SecAggError(ValueError):
    pass


# ----------------------------------------------------------------- tables

@dataclass
class ContingencyTable:
    counts: np.ndarray
    feature: int | str = 0
    released: bool = False

    @property
    def K(self) -> int:
        return self.counts.shape[1]

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.counts))


def bin_feature(values, K: int, strategy: str = "equal-width", edges: np.ndarray | None = None):
    """Discretize ``values`` into ``K`` bins; returns (bins, edges).

    Passing ``edges`` from an earlier call reuses that binning.
    """
    if K < 2:
        raise ValueError("need at least two bins")
    x = np.asarray(values, dtype=float)
    if edges is None:
        lo, hi = float(x.min()), float(x.max())
        if strategy == "equal-width":
            edges = np.linspace(lo, hi, K + 1)
        elif strategy == "quantile":
            edges = np.quantile(x, np.linspace(0.0, 1.0, K + 1))
            if lo == hi:
                warnings.warn("constant column: quantile binning puts every row in one bin",
                              RuntimeWarning, stacklevel=2)
        else:
            raise ValueError(f"unknown binning strategy {strategy!r}")
    edges = np.asarray(edges, dtype=float)
    bins = np.searchsorted(edges[1:-1], x, side="right")
    return np.clip(bins, 0, K - 1), edges


def build_contingency(bins, s, K: int | None = None, feature: int | str = 0,
                      group: int | None = None) -> ContingencyTable:
    """2×K counts. With ``group`` set, row 1 is that group and row 0 the rest."""
    bins = np.asarray(bins, dtype=int)
    s = np.asarray(s, dtype=int)
    K = int(bins.max()) + 1 if K is None else K
    g = (s == group).astype(int) if group is not None else s
    if group is None and g.max(initial=0) > 1:
        raise ValueError("multi-group s needs a one-vs-rest group")
    counts = np.zeros((2, K))
    np.add.at(counts, (g, bins), 1.0)
    return ContingencyTable(counts, feature)


def clip_table(table: ContingencyTable, S: float) -> ContingencyTable:
    if not S > 0:
        raise ValueError("clip bound must be positive")
    norm = table.norm
    factor = 1.0 if norm == 0.0 else min(1.0, S / norm)
    return ContingencyTable(table.counts * factor, table.feature, table.released)


def epsilon_for(sigma: float, delta: float) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / sigma


# ----------------------------------------------------------------- ledger

@dataclass
class DPReleaseRecord:
    S: float
    sigma: float
    delta: float
    epsilon: float
    release_index: int
    feature: str
    mask_version: int
    timestamp: float


@dataclass
class BudgetLedger:
    max_releases: int
    records: list[DPReleaseRecord] = field(default_factory=list)
    audit_path: Path | None = None
    test_mode: bool = False

    @property
    def cumulative_epsilon(self) -> float:
        """Naive sum of per-release ε. Advisory only, not a composition bound."""
        return float(sum(r.epsilon for r in self.records if math.isfinite(r.epsilon)))

    @property
    def remaining(self) -> int:
        return self.max_releases - len(self.records)

    def charge(self, S: float, sigma: float, delta: float, feature: str = "",
               mask_version: int = 0) -> DPReleaseRecord:
        if self.remaining <= 0:
            raise BudgetExhausted(self)
        eps = epsilon_for(sigma, delta) if sigma > 0 else math.inf
        rec = DPReleaseRecord(float(S), float(sigma), float(delta), eps, len(self.records),
                              str(feature), int(mask_version), time.time())
        self.records.append(rec)
        if self.audit_path is not None:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(rec)) + "\n")
        return rec


def gaussian_release(table: ContingencyTable, sigma: float, S: float, rng: np.random.Generator,
                     ledger: BudgetLedger, delta: float = 1e-5, mask_version: int = 0):
    """Add N(0, (sigma*S)^2) noise per cell and charge the ledger.

    ``sigma == 0`` is only accepted by a ledger in test mode.
    """
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0 and not ledger.test_mode:
        raise ValueError("sigma = 0 is only permitted in test mode")
    rec = ledger.charge(S, sigma, delta, str(table.feature), mask_version)
    noisy = table.counts + (rng.normal(0.0, sigma * S, size=table.counts.shape) if sigma > 0 else 0.0)
    return ContingencyTable(noisy, table.feature, True), rec


def default_clip_bound(tables: Sequence[ContingencyTable], q: float = 90.0) -> float:
    return float(np.percentile([t.norm for t in tables], q))


def tables_to_csv(tables: dict[str, ContingencyTable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    for name, t in tables.items():
        w.writerow([f"# feature={name}"])
        w.writerow(["group"] + [f"bin{k}" for k in range(t.K)])
        for g, row in enumerate(t.counts):
            w.writerow([g] + [repr(float(v)) for v in row])
    return buf.getvalue()


def tables_from_csv(text: str) -> dict[str, ContingencyTable]:
    out: dict[str, ContingencyTable] = {}
    name, rows = None, []
    for row in csv.reader(io.StringIO(text)):
        if row and row[0].startswith("# feature="):
            if name is not None:
                out[name] = ContingencyTable(np.array(rows), name, True)
            name, rows = row[0][len("# feature="):], []
        elif row and row[0] != "group":
            rows.append([float(v) for v in row[1:]])
    if name is not None:
        out[name] = ContingencyTable(np.array(rows), name, True)
    return out


# --------------------------------------------------- secure aggregation

@dataclass
class MaskedShare:
    payload: np.ndarray
    party: int
    round_id: int


def _encode(v: np.ndarray) -> np.ndarray:
    scaled = np.rint(np.asarray(v, dtype=float) * 2.0 ** FRAC_BITS)
    if np.any(np.abs(scaled) >= 2.0 ** 62):
        raise SecAggError("value too large for the fixed-point ring")
    return scaled.astype(np.int64).view(np.uint64)


def _decode(u: np.ndarray) -> np.ndarray:
    return u.view(np.int64).astype(float) / 2.0 ** FRAC_BITS


def secagg_round(vectors: Sequence[np.ndarray], rng: np.random.Generator, round_id: int = 0):
    """Mask each party vector with pairwise antisymmetric ring masks.

    Party c adds r^(c,c') for c < c' and subtracts it for c > c', so the
    masks cancel exactly in Z/2^64. Payloads are fixed-point encoded with
    2^-40 resolution; decoding the ring sum gives the plain sum up to that
    quantization.
    """
    m = len(vectors)
    if m < 2:
        raise SecAggError("secure aggregation needs at least two parties")
    shape = np.shape(vectors[0])
    if any(np.shape(v) != shape for v in vectors):
        raise SecAggError("all party vectors must have the same shape")
    enc = [_encode(v) for v in vectors]
    masks = [np.zeros(shape, dtype=np.uint64) for _ in range(m)]
    for a in range(m):
        for b in range(a + 1, m):
            r = rng.integers(0, 2 ** 64, size=shape, dtype=np.uint64, endpoint=False)
            masks[a] += r
            masks[b] -= r
    shares = [MaskedShare(e + mk, c, round_id) for c, (e, mk) in enumerate(zip(enc, masks))]
    return shares, combine_shares(shares)


def combine_shares(shares: Sequence[MaskedShare]) -> np.ndarray:
    rounds = {s.round_id for s in shares}
    if len(rounds) != 1:
        raise SecAggError("shares come from different rounds")
    if len({s.party for s in shares}) != len(shares):
        raise SecAggError("duplicate share for a party")
    total = np.zeros_like(shares[0].payload)
    for s in shares:
        total += s.payload
    return _decode(total)


# ---------------------------------------------------- group embedding

@dataclass
class GroupSketch:
    """Per-group codes; every entity of group g is embedded as ``codes[g]``."""
    codes: np.ndarray

    @property
    def dims(self) -> int:
        return self.codes.shape[1]

    def embed(self, s) -> np.ndarray:
        return self.codes[np.asarray(s, dtype=int)]


def _projection(n_groups: int, dims: int) -> np.ndarray:
    # fixed, seed-independent map; the identity (zero padded) when dims >= K_s,
    # otherwise rows cos(pi (g+1)(d+1) / (K_s+1)), whose first column is
    # already injective in g
    if dims >= n_groups:
        P = np.zeros((n_groups, dims))
        P[:, :n_groups] = np.eye(n_groups)
        return P
    g = np.arange(1, n_groups + 1)[:, None]
    d = np.arange(1, dims + 1)[None, :]
    return np.cos(np.pi * g * d / (n_groups + 1))


def dp_sketch_embedding(s, sigma: float, dims: int, rng: np.random.Generator,
                        n_groups: int | None = None, ledger: BudgetLedger | None = None,
                        delta: float = 1e-5, mask_version: int = 0) -> GroupSketch:
    """Noisy one-hot group codes pushed through a fixed projection.

    Noise is drawn once per group (one release), so z_s for every entity is
    a lookup by group label and toggling to s' is a label substitution.
    """
    s = np.asarray(s, dtype=int)
    K = int(n_groups if n_groups is not None else s.max() + 1)
    onehot = np.eye(K)
    if ledger is not None:
        ledger.charge(1.0, sigma, delta, "z_s", mask_version)
    if sigma > 0:
        onehot = onehot + rng.normal(0.0, sigma, size=onehot.shape)
    return GroupSketch(onehot @ _projection(K, dims))
