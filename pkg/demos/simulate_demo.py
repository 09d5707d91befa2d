"""Single-path and ensemble simulation, compared with the affine mean ODE.

Run with ``python3 demos/simulate_demo.py``.
"""

import numpy as np

from cbire import SimConfig, simulate_ensemble, simulate_path
from cbire.model import model_from_config

alpha, b = 1.0, 0.5
model = model_from_config({"alpha": alpha, "b": b, "sigma": 0.8})
cfg = SimConfig(dt=0.01, t_end=3.0, seed=5)

path = simulate_path(model, 5.0, cfg)
print(f"one path: {len(path.times)} grid points, final state {path.states[-1]:.4f}")

record = np.linspace(0.0, 3.0, 7)
ens = simulate_ensemble(model, 5.0, 20000, cfg, record_times=record)
# with no jumps, d/dt E X = alpha - b E X
exact = alpha / b + (5.0 - alpha / b) * np.exp(-b * ens.times)
for t, m, e in zip(ens.times, ens.stats["x"]["mean"], exact):
    print(f"t={t:4.2f}  sample mean {m:.4f}  ODE {e:.4f}")
print(f"excluded paths: {ens.n_excluded}")
