"""Command-line runner: manifests in, per-seed and aggregated CSVs out.

    python3 -m sccvfl run manifest.yaml [--seeds 0,1] [--method scc_vfl] [--dataset german]
    python3 -m sccvfl sweep manifest.yaml --param weights.lam_gen --values 0,0.005,0.01
    python3 -m sccvfl report results/
    python3 -m sccvfl attack results/

The output root is ``$SCCVFL_OUTPUT`` when set, otherwise the manifest's
``output`` entry. Each (method, split) gets one directory; per-seed files
are written once and never overwritten, so a rerun resumes.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import data
from . import engine as en
from . import masks as mk
from . import metrics as mt
from . import numkit as nk
from .evaluate import attack as run_attack
from .evaluate import evaluate

log = logging.getLogger("sccvfl")

OUTPUT_ENV = "SCCVFL_OUTPUT"
EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

METRIC_COLUMNS = ("accuracy", "logloss", "scg", "fr", "dp_diff", "eo_gap")
# aggregated over seeds; wall-clock time is deliberately left out so reruns match byte for byte
AGG_EXTRA = ("epochs", "best_epoch", "temperature", "feature_mb", "model_mb")

# manifest keys that map onto engine dataclasses
_DP_KEYS = {"S": "clip_S", "sigma": "sigma_sketch", "delta": "delta", "max_refreshes": "max_refreshes"}
_MASK_KEYS = {"rho_M": "rho_M", "rho_P": "rho_P"}


class ManifestError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


# ----------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    dataset: dict
    split: dict = field(default_factory=lambda: {"mode": "iid"})
    methods: list[str] = field(default_factory=lambda: ["scc_vfl"])
    weights: dict = field(default_factory=dict)
    mask: dict = field(default_factory=dict)
    dp: dict = field(default_factory=dict)
    hyper: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=lambda: [0])
    attacks: dict = field(default_factory=lambda: {"aia": True, "pgd": True})
    output: str = "results"

    def __post_init__(self):
        if isinstance(self.dataset, str):
            self.dataset = {"name": self.dataset}
        if not isinstance(self.dataset, dict) or not (self.dataset.get("name") or self.dataset.get("path")):
            raise ManifestError("dataset needs a built-in name or a path")
        if isinstance(self.methods, str):
            self.methods = [self.methods]
        self.methods = [str(m) for m in self.methods]
        known = set(en.method_names())
        bad = [m for m in self.methods if m not in known]
        if bad or not self.methods:
            raise ManifestError(f"unknown method(s) {bad}; known: {sorted(known)}")
        if not self.seeds:
            raise ManifestError("seeds must be a nonempty list")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ManifestError("seeds repeat")
        for key, allowed in (("dp", set(_DP_KEYS)), ("mask", set(_MASK_KEYS)),
                             ("weights", {f.name for f in fields(en.LossWeights)}),
                             ("hyper", {f.name for f in fields(en.Hyper)}),
                             ("split", {f.name for f in fields(data.SplitSpec)} - {"seed"}),
                             ("attacks", {"aia", "pgd"})):
            extra = set(getattr(self, key)) - allowed
            if extra:
                raise ManifestError(f"unknown {key} entries: {sorted(extra)}")
        try:
            self.split_spec(0)
            for m in self.methods:
                self.engine_config(m)
        except (en.ConfigError, data.SplitError, TypeError, ValueError) as e:
            raise ManifestError(str(e)) from e

    # -- (de)serialization
    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        if not isinstance(d, dict):
            raise ManifestError("manifest must be a mapping")
        d = dict(d)
        if "method" in d:
            if "methods" in d:
                raise ManifestError("give either method or methods")
            d["methods"] = d.pop("method")
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise ManifestError(f"unknown manifest sections: {sorted(extra)}")
        if "dataset" not in d:
            raise ManifestError("manifest has no dataset")
        return cls(**d)

    @classmethod
    def parse(cls, text: str) -> "RunManifest":
        try:
            d = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ManifestError(f"manifest is not valid YAML: {e}") from e
        return cls.from_dict(d)

    @classmethod
    def load(cls, path: str | Path) -> "RunManifest":
        p = Path(path)
        if not p.is_file():
            raise ManifestError(f"no manifest at {p}")
        return cls.parse(p.read_text())

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]

    # -- engine objects
    @property
    def dataset_name(self) -> str:
        return str(self.dataset.get("name") or Path(self.dataset["path"]).stem)

    @property
    def split_name(self) -> str:
        return str(self.split.get("mode", "iid"))

    def split_spec(self, seed: int) -> data.SplitSpec:
        return data.SplitSpec(**{**self.split, "seed": int(seed)})

    def engine_config(self, method: str) -> tuple[en.Hyper, en.LossWeights]:
        hyper, weights = en.table_c1(self.dataset_name, method)
        over = dict(self.hyper)
        over.update({_MASK_KEYS[k]: v for k, v in self.mask.items()})
        over.update({_DP_KEYS[k]: v for k, v in self.dp.items()})
        if "gen_weights" in over:
            over["gen_weights"] = tuple(over["gen_weights"])
        return replace(hyper, **over), replace(weights, **self.weights)

    def with_value(self, path: str, value: Any) -> "RunManifest":
        """Copy with one ``section.key`` entry replaced."""
        section, _, key = path.partition(".")
        d = self.to_dict()
        if section in ("seeds", "methods", "output") and not key:
            d[section] = value
        elif section in ("weights", "mask", "dp", "hyper", "split", "attacks", "dataset") and key:
            d[section] = {**d[section], key: value}
        else:
            raise ManifestError(f"unknown parameter path {path!r}")
        return RunManifest.from_dict(d)


def sweepable(path: str) -> bool:
    section, _, key = path.partition(".")
    table = {"weights": {f.name for f in fields(en.LossWeights)}, "hyper": {f.name for f in fields(en.Hyper)},
             "mask": set(_MASK_KEYS), "dp": set(_DP_KEYS), "split": {"train_frac", "val_frac_of_train"}}
    return key in table.get(section, set())


@dataclass
class SweepSpec:
    param: str
    values: list
    base: RunManifest

    def __post_init__(self):
        if not self.values:
            raise ManifestError("a sweep needs at least one value")
        if not sweepable(self.param):
            raise ManifestError(f"unknown parameter path {self.param!r}")
        if len(set(map(repr, self.values))) != len(self.values):
            raise ManifestError("sweep values repeat")

    def manifests(self) -> list[tuple[Any, RunManifest]]:
        return [(v, self.base.with_value(self.param, v)) for v in self.values]


def parse_values(text: str) -> list:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok:
            out.append(yaml.safe_load(tok))
    return out


# ------------------------------------------------------------------ writing

def _header(digest: str) -> str:
    return f"# manifest={digest}\n"


def write_once(path: Path, text: str) -> bool:
    """Create ``path`` with ``text``; an existing file is left alone."""
    try:
        with open(path, "x", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return True
    except FileExistsError:
        return False


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(round(v, 12)) if math.isfinite(v) else str(v)
    return str(v)


def csv_text(digest: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return _header(digest) + buf.getvalue()


def read_csv(path: Path) -> list[dict[str, str]]:
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _num(v: str) -> float:
    try:
        return float(v)
    except (TypeError, ValueError):
        return math.nan


def run_dir(root: Path, manifest: RunManifest, method: str) -> Path:
    return root / manifest.dataset_name / f"{method}__{manifest.split_name}"


# ------------------------------------------------------------------ running

def load_data(manifest: RunManifest) -> tuple[data.Dataset, data.VerticalLayout]:
    spec = manifest.dataset
    name = spec.get("name")
    if spec.get("path"):
        schema = data.load_schema(spec["schema"]) if spec.get("schema") else None
        ds = data.load_dataset(spec["path"], schema)
        if "layout" not in spec:
            raise ManifestError("a dataset path needs a layout (party -> source columns)")
        layout = data.VerticalLayout.from_source_groups(spec["layout"], ds)
        layout.validate(ds.d)
        return ds, layout
    ds = data.load_dataset(name)
    return ds, data.builtin_layout(name, ds)


def _model_from_tensors(tensors: dict, layout: data.VerticalLayout, hyper: en.Hyper, n_classes: int):
    model = en.SplitModel.init(layout, n_classes, hyper, np.random.default_rng(0))
    named = model.named()
    for k, arr in named.items():
        arr[...] = tensors[f"model.{k}"]
    nk.bump(*model.modules())
    return model


def run_seed(manifest: RunManifest, method: str, seed: int, ds, layout, out: Path) -> dict:
    digest = manifest.digest
    hyper, weights = manifest.engine_config(method)
    splits = en.prepare_splits(ds, manifest.split_spec(seed))
    t0 = time.perf_counter()
    tm = en.train(splits, layout, method, weights, hyper, seed)
    want_attacks = bool(manifest.attacks.get("aia", True) or manifest.attacks.get("pgd", True))
    ev = evaluate(tm, splits, attacks=want_attacks)
    runtime = time.perf_counter() - t0
    stem = f"seed_{seed}"

    hist_cols = list(tm.history[0])
    for rec in tm.history:
        for k in rec:
            if k not in hist_cols:
                hist_cols.append(k)
    write_once(out / f"{stem}.history.csv",
               csv_text(digest, hist_cols, [[r.get(k, "") for k in hist_cols] for r in tm.history]))
    if ev.attacks is not None:
        write_once(out / f"{stem}.attacks.csv", _attack_csv(digest, ev.attacks, manifest.attacks))
    audit = [json.dumps({k: v for k, v in asdict(r).items() if k != "timestamp"}, sort_keys=True)
             for r in tm.ledger.records]
    write_once(out / f"{stem}.audit.jsonl", json.dumps({"manifest": digest}) + "\n" + "\n".join(audit) + "\n")
    c = tm.comm
    write_once(out / f"{stem}.comm.csv", csv_text(
        digest, ["feature_bytes", "model_bytes", "aux_bytes", "feature_mb", "model_mb", "steps", "epochs",
                 "runtime_s"],
        [[c["feature_bytes"], c["model_bytes"], c["aux_bytes"], c["feature_mb"], c["model_mb"], c["steps"],
          tm.epochs_run, round(runtime, 3)]]))
    mask_doc = mk.mask_to_dict(tm.mask, layout, ds.feature_names)
    mask_doc["manifest"] = digest
    write_once(out / f"{stem}.mask.json", json.dumps(mask_doc, indent=2, sort_keys=True) + "\n")
    snap = out / f"{stem}.snapshot.bin"
    if not snap.exists():
        tensors = tm.tensors()
        tensors[f"manifest:{digest}"] = np.zeros(0)
        nk.save_snapshot(snap, tensors)

    row = {"dataset": manifest.dataset_name, "split": manifest.split_name, "method": method, "seed": seed}
    row.update(ev.row())
    row.pop("flags", None)
    cols = ["dataset", "split", "method", "seed", *METRIC_COLUMNS, *AGG_EXTRA]
    # the metrics file is written last: its presence marks a completed seed
    write_once(out / f"{stem}.metrics.csv", csv_text(digest, cols, [[row[k] for k in cols]]))
    return row


def _attack_csv(digest: str, rep: mt.AttackReport, toggles: dict) -> str:
    rows = []
    if toggles.get("aia", True):
        rows += [["aia", T, v] for T, v in sorted(rep.aia_sr.items())]
    if toggles.get("pgd", True):
        rows += [["pgd", e, v] for e, v in sorted(rep.pgd_sr.items())]
    return csv_text(digest, ["attack", "x", "sr"], rows)


def aggregate_dir(out: Path, digest: str, manifest: RunManifest, method: str) -> Path | None:
    rows = [read_csv(p)[0] for p in sorted(out.glob("seed_*.metrics.csv"), key=_seed_key)]
    if not rows:
        return None
    keys = [*METRIC_COLUMNS, *AGG_EXTRA]
    recs = [{k: _num(r[k]) for k in keys} for r in rows]
    if len(recs) >= 2:
        agg = mt.aggregate(recs)
    else:
        agg = {k: (recs[0][k], math.nan) for k in keys}
    body = [[manifest.dataset_name, manifest.split_name, method, len(recs), k, agg[k][0], agg[k][1]]
            for k in keys]
    path = out / "aggregate.csv"
    # aggregation is derived data; it is rewritten whenever the seed set grows
    path.write_text(csv_text(digest, ["dataset", "split", "method", "n_seeds", "metric", "mean", "std"], body))
    return path


def _seed_key(p: Path) -> int:
    return int(p.name.split(".")[0].split("_")[1])


def execute(manifest: RunManifest, root: Path) -> tuple[int, list[dict]]:
    """Run every (method, seed); returns (exit code, rows)."""
    ds, layout = load_data(manifest)
    digest = manifest.digest
    failures, rows = 0, []
    for method in manifest.methods:
        out = run_dir(root, manifest, method)
        out.mkdir(parents=True, exist_ok=True)
        write_once(out / "manifest.yaml", _header(digest) + manifest.dumps())
        for seed in manifest.seeds:
            done = out / f"seed_{seed}.metrics.csv"
            if done.exists():
                rows.append(read_csv(done)[0])
                continue
            try:
                rows.append(run_seed(manifest, method, seed, ds, layout, out))
                log.info("%s seed %d done", method, seed)
            except Exception as e:  # one failing seed must not take the others down
                failures += 1
                msg = "".join(traceback.format_exception(type(e), e, e.__traceback__))
                (out / f"seed_{seed}.error.txt").write_text(_header(digest) + msg)
                log.error("%s seed %d failed: %s", method, seed, e)
        aggregate_dir(out, digest, manifest, method)
    return (EXIT_PARTIAL if failures else EXIT_OK), rows


def sweep(spec: SweepSpec, root: Path) -> tuple[int, Path]:
    code = EXIT_OK
    table = []
    for value, man in spec.manifests():
        sub = root / f"sweep__{spec.param}" / f"{value}"
        rc, _ = execute(man, sub)
        code = max(code, rc)
        for method in man.methods:
            agg = run_dir(sub, man, method) / "aggregate.csv"
            if not agg.exists():
                continue
            stats = {r["metric"]: (r["mean"], r["std"]) for r in read_csv(agg)}
            table.append([spec.param, value, method] +
                         [x for k in ("accuracy", "logloss", "scg", "fr") for x in map(_num, stats[k])])
    cols = ["param", "value", "method", "acc_mean", "acc_std", "logloss_mean", "logloss_std",
            "scg_mean", "scg_std", "fr_mean", "fr_std"]
    path = root / f"sweep__{spec.param}" / "sweep.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(spec.base.digest, cols, table))
    return code, path


# ------------------------------------------------------------------- report

def _method_dirs(root: Path) -> list[Path]:
    return sorted({p.parent for p in root.rglob("seed_*.metrics.csv")})


def _series(rows: Sequence[tuple[float, float]]) -> list[tuple[float, float, float, int]]:
    by: dict[float, list[float]] = {}
    for x, v in rows:
        by.setdefault(x, []).append(v)
    out = []
    for x in sorted(by):
        v = np.array(by[x])
        out.append((x, float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else math.nan, len(v)))
    return out


def report(root: Path) -> dict[str, Path]:
    dirs = _method_dirs(root)
    if not dirs:
        raise ReportError(f"no completed runs under {root}")
    digest = hashlib.sha256("".join(str(d.relative_to(root)) for d in dirs).encode()).hexdigest()[:16]
    attack_rows, curve_rows, summary = [], [], []
    for d in dirs:
        meta = read_csv(sorted(d.glob("seed_*.metrics.csv"))[0])[0]
        tag = (meta["dataset"], meta["split"], meta["method"])
        per: dict[str, list[tuple[float, float]]] = {"aia": [], "pgd": []}
        for f in sorted(d.glob("seed_*.attacks.csv"), key=_seed_key):
            for r in read_csv(f):
                per[r["attack"]].append((_num(r["x"]), _num(r["sr"])))
        for kind, pts in per.items():
            for x, m, s, n in _series(pts):
                attack_rows.append([*tag, kind, x, m, s, n])
        hist: dict[str, list[tuple[float, float]]] = {}
        for f in sorted(d.glob("seed_*.history.csv"), key=_seed_key):
            for r in read_csv(f):
                for k in ("train_loss", "val_acc", "val_logloss", "val_scg", "val_fr"):
                    hist.setdefault(k, []).append((_num(r["epoch"]), _num(r[k])))
        for k, pts in hist.items():
            for x, m, s, n in _series(pts):
                curve_rows.append([*tag, k, x, m, s, n])
        recs = [{k: _num(r[k]) for k in METRIC_COLUMNS}
                for r in (read_csv(f)[0] for f in sorted(d.glob("seed_*.metrics.csv"), key=_seed_key))]
        summary.append((tag, recs))

    out = {}
    out["attacks"] = root / "report_attacks.csv"
    out["attacks"].write_text(csv_text(digest, ["dataset", "split", "method", "attack", "x", "mean", "std", "n"],
                                       attack_rows))
    out["curves"] = root / "report_curves.csv"
    out["curves"].write_text(csv_text(digest, ["dataset", "split", "method", "series", "epoch", "mean", "std", "n"],
                                      curve_rows))
    lines = [f"<!-- manifest={digest} -->", "",
             "| dataset | split | method | n | Acc | LogLoss | SCG | FR (%) |",
             "|---|---|---|---|---|---|---|---|"]
    for (dset, split, method), recs in summary:
        cells = []
        for k in ("accuracy", "logloss", "scg", "fr"):
            v = np.array([r[k] for r in recs])
            sd = v.std(ddof=1) if len(v) > 1 else float("nan")
            cells.append(f"{v.mean():.4f} ± {sd:.4f}")
        lines.append(f"| {dset} | {split} | {method} | {len(recs)} | " + " | ".join(cells) + " |")
    out["summary"] = root / "summary.md"
    out["summary"].write_text("\n".join(lines) + "\n")
    return out


def reattack(root: Path) -> int:
    """Rerun the probes from stored snapshots; fills missing reports, checks existing ones."""
    dirs = _method_dirs(root)
    if not dirs:
        raise ReportError(f"no completed runs under {root}")
    code = EXIT_OK
    for d in dirs:
        text = (d / "manifest.yaml").read_text()
        manifest = RunManifest.parse(text)
        method = d.name.split("__")[0]
        ds, layout = load_data(manifest)
        hyper, weights = manifest.engine_config(method)
        for snap in sorted(d.glob("seed_*.snapshot.bin"), key=_seed_key):
            seed = _seed_key(snap)
            tensors = nk.load_snapshot(snap)
            splits = en.prepare_splits(ds, manifest.split_spec(seed))
            n_classes = max(int(splits.train.y.max()) + 1, 2)
            model = _model_from_tensors(tensors, layout, hyper, n_classes)
            mask = mk.mask_from_dict(json.loads((d / f"seed_{seed}.mask.json").read_text()), layout,
                                     ds.feature_names)
            shim = _AttackTarget(model, mask, hyper, seed)
            rep = run_attack(shim, splits)
            text = _attack_csv(manifest.digest, rep, manifest.attacks)
            path = d / f"seed_{seed}.attacks.csv"
            if not write_once(path, text) and path.read_text() != text:
                log.error("%s: stored attack report differs from the rerun", path)
                code = EXIT_PARTIAL
    return code


@dataclass
class _AttackTarget:
    """The attributes of a trained model that the probes read."""
    model: en.SplitModel
    mask: mk.FeatureMask
    hyper: en.Hyper
    seed: int


# ---------------------------------------------------------------------- main

def _output_root(manifest: RunManifest) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or manifest.output)


def _apply_overrides(manifest: RunManifest, args) -> RunManifest:
    d = manifest.to_dict()
    if getattr(args, "seeds", None):
        d["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
    if getattr(args, "method", None):
        d["methods"] = [m for m in args.method.split(",") if m]
    if getattr(args, "dataset", None):
        d["dataset"] = {"name": args.dataset}
    return RunManifest.from_dict(d)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sccvfl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)
    for name in ("run", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("manifest")
        p.add_argument("--seeds", help="comma-separated seed list")
        p.add_argument("--method", help="method name (comma-separated for several)")
        p.add_argument("--dataset", help="built-in dataset name")
        if name == "sweep":
            p.add_argument("--param", required=True, help="section.key, e.g. mask.rho_M")
            p.add_argument("--values", required=True, help="comma-separated values")
    for name in ("report", "attack"):
        p = sub.add_parser(name)
        p.add_argument("dir")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb in ("run", "sweep"):
            manifest = _apply_overrides(RunManifest.load(args.manifest), args)
            root = _output_root(manifest)
            if args.verb == "run":
                code, rows = execute(manifest, root)
                print(f"{len(rows)} seed run(s) under {root}")
                return code
            spec = SweepSpec(args.param, parse_values(args.values), manifest)
            code, path = sweep(spec, root)
            print(path)
            return code
        if args.verb == "report":
            for k, p in report(Path(args.dir)).items():
                print(f"{k}: {p}")
            return EXIT_OK
        return reattack(Path(args.dir))
    except (ManifestError, ReportError, data.SchemaError, data.LayoutError, en.ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
