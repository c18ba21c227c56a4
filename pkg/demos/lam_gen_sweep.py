"""How the generator weight moves the counterfactual gap of the full model.

    python3 demos/lam_gen_sweep.py [n_seeds]
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
splits = [en.prepare_splits(ds, data.SplitSpec(seed=s)) for s in range(n_seeds)]

for lam in (0.0, 0.005, 0.01, 0.02, 0.05):
    rows = [evaluate(en.train(sp, layout, "scc_vfl", en.LossWeights(lam_gen=lam), seed=i), sp, attacks=False).row()
            for i, sp in enumerate(splits)]
    scg = np.mean([r["scg"] for r in rows])
    fr = np.mean([r["fr"] for r in rows])
    print(f"lam_gen={lam:<6} SCG={scg:.4f} FR={fr:.2f}%")
