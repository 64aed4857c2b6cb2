"""Track the 10-gene cell-cycle network from simulated RNA-seq counts.

Compares the exact filter and smoother with their particle counterparts on
one simulated series and prints the correct-state rates.

    python demos/track_cell_cycle.py
"""

import numpy as np

from pobds import RnaSeqModel, cell_cycle_network, run_bks
from pobds.core import unpack_bits
from pobds.experiments import correct_state_rate, simulate
from pobds.particle import run_apf_bkf, smooth_trace

rng = np.random.default_rng(7)
net = cell_cycle_network(p=0.01)
obs = RnaSeqModel.uniform(net.d)
states, ys = simulate(net, obs, 100, rng)
truth = unpack_bits(states[1:], net.d)

exact = run_bks(net, obs, ys)
forward = run_apf_bkf(net, obs, ys, 1000, rng)
results = {
    "BKF": exact.filter.estimates,
    "BKS": exact.estimates,
    "APF-BKF (N=1000)": forward.estimates,
    "APF-BKS (N=1000)": smooth_trace(forward, net).estimates,
}

print(f"{'estimator':<18}{'per gene':>10}{'whole state':>13}")
for name, est in results.items():
    print(f"{name:<18}{correct_state_rate(truth, est):>9.1f}%{correct_state_rate(truth, est, 'vector'):>12.1f}%")
print(f"\nexact log-likelihood {exact.filter.log_likelihood:.2f}, APF estimate {forward.log_likelihood:.2f}")
