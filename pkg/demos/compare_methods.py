"""Train each method on German credit for a few seeds and print a small table.

    python3 demos/compare_methods.py [n_seeds]

The same numbers come out of ``python3 -m sccvfl run demos/german.yaml``
followed by ``report``; this script just keeps everything in memory.
"""

import sys
import warnings

import numpy as np

from sccvfl import data
from sccvfl import engine as en
from sccvfl.evaluate import evaluate

warnings.simplefilter("ignore", RuntimeWarning)
n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3

ds = data.load_dataset("german")
layout = data.builtin_layout("german", ds)
methods = ("plain",) + en.BASELINES + en.ABLATIONS
rows = {m: [] for m in methods}
for seed in range(n_seeds):
    sp = en.prepare_splits(ds, data.SplitSpec(seed=seed))
    for m in methods:
        ev = evaluate(en.train(sp, layout, m, seed=seed), sp)
        r = ev.row()
        r["aia80"] = ev.attacks.aia_sr[80]
        r["pgd0.2"] = ev.attacks.pgd_sr[0.2]
        rows[m].append(r)

cols = ("accuracy", "scg", "fr", "aia80", "pgd0.2", "feature_mb")
print(f"{'method':20s}" + "".join(f"{c:>12s}" for c in cols))
for m in methods:
    print(f"{m:20s}" + "".join(f"{np.mean([r[c] for r in rows[m]]):12.4f}" for c in cols))
