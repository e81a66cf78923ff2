"""Switching systems: does modelling regimes pay off?

Fits switching multiscale, switching single-modality and stationary multiscale
EM to two-regime simulations and reports latent CC and regime accuracy.

    python demos/03_switching_study.py [n_systems] [T] [iters]
"""

import sys

import numpy as np

from smds.harness import ExperimentConfig, simulation_study
from smds.simulate import SimConfig

n, T, iters = (int(a) for a in (sys.argv[1:] + ["2", "2000", "20"][len(sys.argv) - 1:]))
methods = ["smsnf-em", "skf-em", "spcf-em", "msnf-em"]
cfg = ExperimentConfig(sim=SimConfig(M=2, T_train=T, T_test=T), em={"d": 10, "max_iters": iters},
                       methods=methods, smooth=False).validate()
rows = simulation_study(cfg, range(1, n + 1))

for m in methods:
    cc = np.array([r[m]["latent_cc_normalized"] for r in rows])
    acc = [r[m].get("regime_accuracy") for r in rows]
    acc = "n/a" if acc[0] is None else f"{np.mean(acc):.3f}"
    print(f"{m:>9}: normalized latent CC {cc.mean():.3f} +- {cc.std():.3f}, regime accuracy {acc}")
