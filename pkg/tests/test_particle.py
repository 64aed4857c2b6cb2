import itertools

import numpy as np
import pytest

from pobds.core import DegeneracyError, GrnModel, cell_cycle_network, unpack_bits
from pobds.exact import build_transition_matrix, run_bkf, run_bks
from pobds.experiments import correct_state_rate, simulate
from pobds.particle import (
    ParticleEnsemble,
    apf_bkf_step,
    apf_bks,
    compact,
    loglik_function,
    resample,
    run_apf_bkf,
    smooth_trace,
)
from pobds.rnaseq import RnaSeqModel


@pytest.fixture
def table2_toy():
    """Three-gene network with the default observation parameters and simulated counts."""
    grn = GrnModel([[0, 1, 0], [-1, 0, 1], [1, 1, -1]], [-0.5, 0.5, -0.5], 0.05)
    obs = RnaSeqModel.uniform(3)
    _, ys = simulate(grn, obs, 10, np.random.default_rng(2024))
    return grn, obs, ys


def uniform_ensemble(d, N, rng):
    return ParticleEnsemble(rng.integers(0, 2**d, N, dtype=np.uint64), np.full(N, 1.0 / N))


class TestCompact:
    def test_all_identical(self):
        u = compact(ParticleEnsemble(np.full(5, 3, dtype=np.uint64), np.full(5, 0.2)))
        assert u.F == 1 and u.weights[0] == pytest.approx(1.0)

    def test_all_distinct(self):
        w = np.array([0.1, 0.2, 0.3, 0.4])
        u = compact(ParticleEnsemble(np.array([7, 1, 4, 2], dtype=np.uint64), w))
        assert u.F == 4
        np.testing.assert_array_equal(u.particles, [1, 2, 4, 7])
        np.testing.assert_array_equal(u.weights, [0.2, 0.4, 0.3, 0.1])

    def test_additivity(self):
        u = compact(ParticleEnsemble(np.array([5, 2, 5], dtype=np.uint64), [0.3, 0.2, 0.5]))
        np.testing.assert_array_equal(u.particles, [2, 5])
        np.testing.assert_allclose(u.weights, [0.2, 0.8])
        np.testing.assert_array_equal(u.particles[u.inverse], [5, 2, 5])


class TestResample:
    def test_zero_weights_never_drawn(self):
        rng = np.random.default_rng(0)
        idx = resample(np.array([0.0, 1.0, 0.0, 2.0, 0.0]), 10_000, rng)
        assert set(np.unique(idx)) == {1, 3}
        assert abs((idx == 3).mean() - 2 / 3) < 0.02

    @pytest.mark.parametrize("method", ["multinomial", "systematic"])
    def test_frequencies(self, method):
        w = np.array([0.5, 0.25, 0.125, 0.125])
        idx = resample(w, 80_000, np.random.default_rng(1), method)
        np.testing.assert_allclose(np.bincount(idx, minlength=4) / 80_000, w, atol=0.01)

    def test_all_zero_raises(self):
        with pytest.raises(DegeneracyError):
            resample(np.zeros(3), 5, np.random.default_rng(0))


class TestApfStep:
    def test_noiseless_gives_uniform_weights(self, toy):
        grn, obs, ys = toy
        rng = np.random.default_rng(0)
        step = apf_bkf_step(grn.replace(p=0.0), obs, ys[0], uniform_ensemble(3, 100, rng), rng)
        np.testing.assert_allclose(step.ensemble.weights, 0.01, rtol=1e-12)

    def test_single_particle(self, toy):
        grn, obs, ys = toy
        rng = np.random.default_rng(4)
        ens = ParticleEnsemble([5], [1.0])
        step = apf_bkf_step(grn, obs, ys[0], ens, rng)
        x1 = step.ensemble.particles[0]
        assert step.log_beta == pytest.approx(obs.state_loglik(ys[0], x1), abs=1e-12)
        assert step.ancestors[0] == 0

    def test_estimator_formula(self, toy):
        grn, obs, ys = toy
        rng = np.random.default_rng(5)
        ens = uniform_ensemble(3, 40, rng)
        step = apf_bkf_step(grn, obs, ys[0], ens, rng)
        ll = loglik_function(obs, ys[0])
        mode = grn.apply(ens.particles)
        V = ens.weights * np.exp(ll(mode))
        Wt = np.exp(ll(step.ensemble.particles) - ll(mode[step.ancestors]))
        assert step.log_beta == pytest.approx(np.log(V.sum() * Wt.mean()), abs=1e-12)
        np.testing.assert_allclose(step.ensemble.weights, Wt / Wt.sum(), rtol=1e-12)
        np.testing.assert_allclose(step.z, Wt / Wt.sum() @ unpack_bits(step.ensemble.particles, 3), atol=1e-14)

    def test_estimator_is_exactly_unbiased(self):
        """Enumerate every outcome of a two-particle step and average the estimate."""
        grn = GrnModel([[0, 1], [-1, 1]], [0.5, -0.5], 0.2)
        obs = RnaSeqModel(1.0, 0.2, [1.5, 2.0], [3.0, 4.0])
        y = np.array([4, 1])
        L = np.exp(obs.state_loglik(y, np.arange(4, dtype=np.uint64)))
        M = build_transition_matrix(grn)
        f = grn.apply(np.arange(4, dtype=np.uint64)).astype(int)
        expected = 0.0
        for x0 in itertools.product(range(4), repeat=2):
            g = L[f[list(x0)]]
            V = 0.5 * g
            for anc in itertools.product(range(2), repeat=2):
                p_anc = np.prod(V[list(anc)] / V.sum())
                for x1 in itertools.product(range(4), repeat=2):
                    p_x1 = np.prod([M[x1[j], x0[anc[j]]] for j in range(2)])
                    est = V.sum() * np.mean([L[x1[j]] / g[anc[j]] for j in range(2)])
                    expected += 1 / 16 * p_anc * p_x1 * est
        exact = np.exp(run_bkf(grn, obs, y[None]).log_likelihood)
        assert expected == pytest.approx(exact, rel=1e-12)

    def test_one_step_mean(self, toy):
        grn, obs, ys = toy
        rng = np.random.default_rng(8)
        step = apf_bkf_step(grn, obs, ys[0], uniform_ensemble(3, 50_000, rng), rng)
        exact = run_bkf(grn, obs, ys[:1]).mean[0]
        assert np.abs(step.z - exact).max() < 0.01

    def test_one_step_likelihood_mean(self, toy):
        grn, obs, ys = toy
        exact = np.exp(run_bkf(grn, obs, ys[:1]).log_likelihood)
        ests = []
        for r in range(200):
            rng = np.random.default_rng([3, r])
            ests.append(np.exp(apf_bkf_step(grn, obs, ys[0], uniform_ensemble(3, 1000, rng), rng).log_beta))
        ests = np.array(ests)
        assert abs(ests.mean() - exact) < 3 * ests.std(ddof=1) / np.sqrt(ests.size)


class TestRunApf:
    def test_deterministic(self, toy):
        grn, obs, ys = toy
        a = run_apf_bkf(grn, obs, ys, 300, np.random.default_rng(1))
        b = run_apf_bkf(grn, obs, ys, 300, np.random.default_rng(1))
        np.testing.assert_array_equal(a.particles, b.particles)
        np.testing.assert_array_equal(a.log_beta, b.log_beta)

    def test_tracks_exact_filter(self, table2_toy):
        grn, obs, ys = table2_toy
        exact = run_bkf(grn, obs, ys).mean
        tr = run_apf_bkf(grn, obs, ys, 50_000, np.random.default_rng(0))
        assert np.abs(tr.mean - exact).max() < 0.02
        assert np.all((tr.mean >= 0) & (tr.mean <= 1))

    def test_bad_input(self, toy):
        grn, obs, ys = toy
        with pytest.raises(ValueError):
            run_apf_bkf(grn, obs, ys, 0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            run_apf_bkf(grn, obs, ys[:, :2], 10, np.random.default_rng(0))

    def test_initial_distribution(self, toy):
        grn, obs, ys = toy
        pi0 = np.zeros(8)
        pi0[6] = 1.0
        tr = run_apf_bkf(grn, obs, ys[:1], 50, np.random.default_rng(0), pi0=pi0)
        assert np.all(tr.particles[0] == 6)


class TestSmoother:
    def test_last_step_is_filter(self, toy):
        grn, obs, ys = toy
        res = apf_bks(grn, obs, ys, 500, np.random.default_rng(0))
        np.testing.assert_array_equal(res.estimates[-1], res.forward.estimates[-1])
        np.testing.assert_allclose(res.mean[-1], res.forward.mean[-1], atol=1e-12)

    def test_naive_path_agrees(self, toy):
        grn, obs, ys = toy
        tr = run_apf_bkf(grn, obs, ys, 400, np.random.default_rng(3))
        a, b = smooth_trace(tr, grn), smooth_trace(tr, grn, naive=True)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
        np.testing.assert_allclose(a.initial_mean, b.initial_mean, atol=1e-12)

    def test_tracks_exact_smoother(self, table2_toy):
        grn, obs, ys = table2_toy
        exact = run_bks(grn, obs, ys).mean
        res = apf_bks(grn, obs, ys, 50_000, np.random.default_rng(1))
        assert np.abs(res.mean - exact).max() < 0.02

    def test_uninformative_future(self, toy):
        # with a flat likelihood the smoothed weights agree with the filter
        # weights up to Monte-Carlo error (the identity is exact only for the
        # exact filter, since resampling perturbs the forward weights)
        grn, _, ys = toy
        flat = RnaSeqModel(1.0, 0.5, np.full(3, 1e-20), np.full(3, 5.0))
        res = apf_bks(grn, flat, ys, 50_000, np.random.default_rng(2))
        np.testing.assert_allclose(res.mean, res.forward.mean, atol=0.01)


@pytest.mark.invariant
class TestInvariants:
    def test_smoothed_weights_normalised(self, toy):
        grn, obs, ys = toy
        res = apf_bks(grn, obs, ys, 1000, np.random.default_rng(4))
        for w in res.smoothed_weights:
            assert w.sum() == pytest.approx(1.0, abs=1e-8)

    def test_unique_counts_and_weight(self, toy):
        grn, obs, ys = toy
        for N in (3, 50, 2000):
            tr = run_apf_bkf(grn, obs, ys, N, np.random.default_rng(N))
            assert np.all(tr.unique_counts <= min(N, 8))
            for k in range(tr.T + 1):
                u = tr.unique(k)
                assert len(np.unique(u.particles)) == u.F
                assert u.weights.sum() == pytest.approx(tr.weights[k].sum(), abs=1e-10)
                np.testing.assert_allclose(u.weights, np.bincount(u.inverse, tr.weights[k]), atol=1e-10)

    def test_filter_weights_normalised(self, toy):
        grn, obs, ys = toy
        tr = run_apf_bkf(grn, obs, ys, 777, np.random.default_rng(5))
        np.testing.assert_allclose(tr.weights.sum(axis=1), 1.0, atol=1e-10)

    def test_more_particles_and_smoothing_help(self):
        net, obs = cell_cycle_network(0.05), RnaSeqModel.uniform(10)
        rates = {200: [], 1000: [], "bks": []}
        for r in range(200):
            states, ys = simulate(net, obs, 30, np.random.default_rng([17, r]))
            truth = unpack_bits(states[1:], 10)
            small = run_apf_bkf(net, obs, ys, 200, np.random.default_rng([18, r]))
            big = run_apf_bkf(net, obs, ys, 1000, np.random.default_rng([19, r]))
            rates[200].append(correct_state_rate(truth, small.estimates))
            rates[1000].append(correct_state_rate(truth, big.estimates))
            rates["bks"].append(correct_state_rate(truth, smooth_trace(big, net).estimates))
        assert np.mean(rates[1000]) >= np.mean(rates[200]) - 1.0
        assert np.mean(rates["bks"]) >= np.mean(rates[1000])

    def test_likelihood_unbiased(self, table2_toy):
        grn, obs, ys = table2_toy
        grn = grn.replace(p=0.01)
        ys = simulate(grn, obs, 10, np.random.default_rng(7))[1]
        exact = run_bkf(grn, obs, ys).log_likelihood
        ests = np.exp([run_apf_bkf(grn, obs, ys, 100, np.random.default_rng([6, r])).log_likelihood - exact
                       for r in range(2000)])
        assert abs(ests.mean() - 1.0) < 3 * ests.std(ddof=1) / np.sqrt(ests.size)
