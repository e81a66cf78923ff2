"""Simulate a switching multiscale system and decode it with the true parameters.

Shows what each modality contributes when nothing has to be learned: the
multiscale filter against field-only and spike-only views of the same data.

    python demos/01_filter_true_model.py [seed]
"""

import sys

from smds.evaluate import evaluate_model
from smds.learning import restrict_to_modality
from smds.simulate import SimConfig, simulate_system

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
system = simulate_system(SimConfig(M=2, T_train=500, T_test=3000), seed=seed)
print(f"seed {seed}: {system.test.n_neurons} neurons, {system.test.n_features} field features, "
      f"T={system.test.T}")

for modality in ("multiscale", "gaussian-only", "poisson-only"):
    model, series = restrict_to_modality(system.model, system.test, modality)
    r = evaluate_model(model, series, true_model=system.model, true_series=system.test)
    print(f"{modality:>14}: latent CC {r.latent_cc:.3f} (smoothed {r.latent_cc_smoothed:.3f}), "
          f"regime accuracy {r.regime_accuracy:.3f}")
