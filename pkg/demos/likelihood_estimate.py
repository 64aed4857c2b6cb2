"""The APF likelihood estimate is unbiased but heavy-tailed.

Averages the particle estimate of p(y_1..y_T) over many runs and compares
it with the exact value from the Boolean Kalman filter.

    python demos/likelihood_estimate.py
"""

import numpy as np

from pobds import GrnModel, RnaSeqModel, run_bkf
from pobds.experiments import simulate
from pobds.particle import run_apf_bkf

net = GrnModel([[0, 1, 0], [-1, 0, 1], [1, 1, -1]], [-0.5, 0.5, -0.5], p=0.01)
obs = RnaSeqModel.uniform(3)
_, ys = simulate(net, obs, 10, np.random.default_rng(1))
exact = run_bkf(net, obs, ys).log_likelihood

for N in (10, 100, 1000):
    logs = np.array([run_apf_bkf(net, obs, ys, N, np.random.default_rng([N, r])).log_likelihood
                     for r in range(1000)])
    ratio = np.exp(logs - exact)
    se = ratio.std(ddof=1) / np.sqrt(ratio.size)
    print(f"N={N:>5}: mean ratio {ratio.mean():.3f} +- {se:.3f}   median ratio {np.median(ratio):.3f}")
