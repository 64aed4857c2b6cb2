"""Estimate the noise level and expression parameters by Monte-Carlo EM.

A 3-gene network keeps the run short.  EM starts from the middle of each
search box and the fitted values are printed next to the truth.

    python demos/fit_parameters.py
"""

import warnings

import numpy as np

from pobds import GrnModel, ParameterVector, RnaSeqModel, em_fit
from pobds.experiments import default_theta0, simulate

net = GrnModel([[0, 1, 0], [-1, 0, 1], [1, 1, -1]], [-0.5, 0.5, -0.5], p=0.05)
obs = RnaSeqModel.uniform(3)
_, ys = simulate(net, obs, 200, np.random.default_rng(3))

truth = ParameterVector.from_models(net, obs)
theta0 = default_theta0(net.d, truth, ["p", "mu", "delta"])
with warnings.catch_warnings():
    warnings.simplefilter("ignore", RuntimeWarning)
    res = em_fit(ys, theta0, net, 500, np.random.default_rng(4), max_iters=40)

print(f"iterations {res.iterations}, converged {res.converged}")
for name in ("p", "mu", "delta"):
    print(f"{name:>6}: start {np.round(theta0.get(name), 3)}  fit {np.round(res.theta.get(name), 3)}"
          f"  true {np.round(truth.get(name), 3)}")
