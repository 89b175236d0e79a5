import numpy as np
import pytest
from scipy import stats

from glmmsmc import numerics, smc
from glmmsmc.errors import NumericError, ValidationError, WeightDegeneracyError
from glmmsmc.model import ModelSpec, RandomBlock, log_pi0_batch, log_pi_batch
from glmmsmc.pql import fit_from_estimates

from conftest import make_small_mixed
from quadrature import grid_moments, grid_posterior


class TestSchedule:
    def test_s105(self):
        g = smc.make_schedule(105).gammas
        assert g.size == 106 and g[0] == 0 and g[100] == 1 and g[105] == 1 and g[50] == 0.5
        assert smc.make_schedule(105).first_one == 100

    def test_s6(self):
        assert smc.make_schedule(6).gammas.tolist() == [0, 1, 1, 1, 1, 1, 1]

    def test_too_short(self):
        with pytest.raises(ValidationError):
            smc.make_schedule(5)

    def test_custom_schedule_checks(self):
        with pytest.raises(ValidationError):
            smc.Schedule([0.0, 0.6, 0.5, 1.0])
        with pytest.raises(ValidationError):
            smc.Schedule([0.1, 1.0])


class TestEss:
    def test_examples(self):
        assert smc.ess(np.zeros(7)) == pytest.approx(7.0, abs=1e-12)
        assert smc.ess([0.0, -np.inf, -np.inf]) == pytest.approx(1.0, abs=1e-12)
        assert smc.ess(np.log([2.0, 1.0, 1.0])) == pytest.approx(16 / 6, abs=1e-12)

    def test_bounds(self):
        lw = np.random.default_rng(0).standard_normal(50) * 5
        assert 1.0 <= smc.ess(lw) <= 50.0

    def test_all_minus_inf(self):
        with pytest.raises(WeightDegeneracyError):
            smc.ess([-np.inf, -np.inf])


def _system(model, nu, sigma_sq, lw=None):
    N = nu.shape[0]
    lw = np.full(N, -np.log(N)) if lw is None else lw
    return smc.ParticleSystem(nu, sigma_sq, lw, nu @ model.C.T, seed=0, stage=1)


class TestReweight:
    def test_two_particles(self, monkeypatch, tiny_poisson):
        model, pql = tiny_poisson
        sysm = _system(model, np.zeros((2, 2)), np.zeros((2, 0)))
        monkeypatch.setattr(smc, "log_ratio_batch", lambda *a: np.array([0.0, np.log(3.0)]))
        out = smc.reweight(sysm, 1.0, model, pql)
        np.testing.assert_allclose(out.weights(), [0.25, 0.75], rtol=1e-14)
        assert numerics.log_sum_exp(out.log_weights) == pytest.approx(0.0, abs=1e-10)

    def test_zero_step(self, tiny_poisson):
        model, pql = tiny_poisson
        sysm = _system(model, np.zeros((3, 2)), np.zeros((3, 0)), np.log([0.2, 0.3, 0.5]))
        assert smc.reweight(sysm, 0.0, model, pql) is sysm

    def test_degenerate(self, monkeypatch, tiny_poisson):
        model, pql = tiny_poisson
        sysm = _system(model, np.zeros((2, 2)), np.zeros((2, 0)))
        monkeypatch.setattr(smc, "log_ratio_batch", lambda *a: np.array([-np.inf, -np.inf]))
        with pytest.raises(WeightDegeneracyError):
            smc.reweight(sysm, 0.1, model, pql)
        monkeypatch.setattr(smc, "log_ratio_batch", lambda *a: np.array([np.nan, 0.0]))
        with pytest.raises(NumericError):
            smc.reweight(sysm, 0.1, model, pql)

    def test_negative_step(self, tiny_poisson):
        model, pql = tiny_poisson
        with pytest.raises(ValidationError):
            smc.reweight(_system(model, np.zeros((2, 2)), np.zeros((2, 0))), -0.1, model, pql)

    def test_telescoping_with_variances(self, small_mixed):
        model, pql = small_mixed
        sysm = smc.initialise(model, pql, 50, seed=4)
        start = sysm
        g = smc.make_schedule(20).gammas
        for s in range(1, g.size):
            sysm = smc.reweight(sysm, g[s] - g[s - 1], model, pql)
        ratio = (log_pi_batch(model, start.nu, start.sigma_sq)
                 - log_pi0_batch(model, pql, start.nu, start.sigma_sq))
        expect = ratio - numerics.log_sum_exp(ratio)
        np.testing.assert_allclose(np.exp(sysm.log_weights), np.exp(expect), rtol=1e-10)


class TestStratified:
    def test_equal_weights(self):
        idx = smc.stratified_resample(np.zeros(9), np.random.default_rng(0))
        assert idx.tolist() == list(range(9))

    def test_point_mass(self):
        lw = np.r_[0.0, np.full(5, -np.inf)]
        assert smc.stratified_resample(lw, np.random.default_rng(0)).tolist() == [0] * 6

    def test_two_halves(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            assert smc.stratified_resample(np.log([0.5, 0.5]), rng).tolist() == [0, 1]

    def test_sorted_and_unbiased(self):
        rng = np.random.default_rng(2)
        w = rng.dirichlet(np.ones(12))
        N, T = w.size, 10_000
        counts = np.array([np.bincount(smc.stratified_resample(np.log(w), rng), minlength=N)
                           for _ in range(T)])
        se = np.sqrt(N * w * (1 - w) / T)
        assert np.all(np.abs(counts.mean(axis=0) - N * w) < 3 * se)
        # every ancestor count lies strictly within two of its expectation
        assert np.all(np.abs(counts - N * w) < 2)

    def test_degenerate(self):
        with pytest.raises(WeightDegeneracyError):
            smc.stratified_resample(np.full(3, -np.inf), np.random.default_rng(0))


class TestMoveConfig:
    def test_defaults(self):
        mc = smc.MoveConfig.from_blocks([[0, 1, 2, 3], [4]])
        np.testing.assert_allclose(mc.tau, [1.2, 2.4])
        assert smc.MoveConfig.singleton(3).J == 3 and smc.MoveConfig.one_block(3).J == 1

    def test_coverage(self):
        with pytest.raises(ValidationError):
            smc.MoveConfig.from_blocks([[0, 1], [1, 2]]).validate(3)
        with pytest.raises(ValidationError):
            smc.MoveConfig.from_blocks([[0]]).validate(2)
        with pytest.raises(ValidationError):
            smc.MoveConfig.from_blocks([[0], [1]], tau=[1.0, -1.0])

    def test_by_class(self):
        m = make_small_mixed()
        mc = smc.MoveConfig.by_class(m, {"fixed": 3.0, "random": 6.0})
        assert mc.J == m.P and mc.tau.tolist() == [3, 3, 6, 6, 6, 6]
        mg = smc.MoveConfig.by_class(m, {"fixed": 3.0, "random": 6.0}, grouped=True)
        assert [I.tolist() for I in mg.partition] == [[0, 1], [2, 3, 4, 5]]


class TestMoveStep:
    def test_zero_tau_freezes_coefficients(self, small_mixed):
        model, pql = small_mixed
        sysm = smc.initialise(model, pql, 20, seed=1)
        mc = smc.MoveConfig.singleton(model.P, 0.0)
        out, counts = smc.move_step(sysm, 0.7, model, pql, mc)
        assert np.array_equal(out.nu, sysm.nu)
        assert np.all(counts == 20)  # proposal equals current, always accepted
        assert not np.array_equal(out.sigma_sq, sysm.sigma_sq)
        assert np.array_equal(out.log_weights, sysm.log_weights)

    def test_gibbs_parameters(self):
        n, q = 12, 10
        C = np.column_stack([np.ones(n), np.tile(np.eye(q), (2, 1))[:n]])
        m = ModelSpec(np.ones(n), C, 1, (RandomBlock("u", 1, q),), A=0.01)
        assert m.gibbs_shape[0] == pytest.approx(5.01)
        pql = fit_from_estimates(m, np.zeros(m.P), [1.0])
        kernel = smc.MoveKernel(m, pql, smc.MoveConfig.singleton(m.P, 0.0))
        nu = np.r_[0.0, 2.0, np.zeros(q - 1)].reshape(1, -1)  # ||u||^2 = 4
        g = np.array([[2.5]])
        _, s2, _, _ = kernel.apply(nu, np.ones((1, 1)), nu @ C.T, 0.3,
                                   np.zeros((1, m.P)), np.zeros((1, m.P)), g)
        assert s2[0, 0] == pytest.approx(2.01 / 2.5, rel=1e-14)

    def test_gibbs_draws_match_inverse_gamma(self, small_mixed):
        model, pql = small_mixed
        N = 4000
        nu = np.tile(pql.nu_hat, (N, 1))
        sysm = _system(model, nu, np.ones((N, 1)))
        out, _ = smc.move_step(sysm, 0.4, model, pql, smc.MoveConfig.singleton(model.P, 0.0))
        rate = model.A[0] + 0.5 * np.sum(pql.nu_hat[2:] ** 2)
        ks = stats.kstest(out.sigma_sq[:, 0], stats.invgamma(model.gibbs_shape[0], scale=rate).cdf)
        assert ks.pvalue > 1e-3

    @pytest.mark.parametrize("blocks", ["singleton", "one_block"])
    @pytest.mark.parametrize("gamma", [0.4, 1.0])
    def test_invariance_against_quadrature(self, tiny_poisson, blocks, gamma):
        model, pql = tiny_poisson
        axes, pts, w = grid_posterior(model, pql, gamma)
        rng = np.random.default_rng(7)
        N = 10_000
        cells = rng.choice(w.size, size=N, p=w)
        h = np.array([a[1] - a[0] for a in axes])
        nu = pts[cells] + (rng.random((N, 2)) - 0.5) * h
        sysm = smc.ParticleSystem(nu, np.zeros((N, 0)), np.full(N, -np.log(N)), nu @ model.C.T,
                                  seed=3, stage=0)
        mc = getattr(smc.MoveConfig, blocks)(model.P)
        kernel = smc.MoveKernel(model, pql, mc)
        for s in range(50):
            sysm.stage = s + 1
            sysm, _ = smc.move_step(sysm, gamma, model, pql, kernel=kernel)
        mean, var, second = grid_moments(pts, w)
        x = sysm.nu
        assert np.all(np.abs(x.mean(axis=0) - mean) < 3 * x.std(axis=0) / np.sqrt(N))
        se2 = (x**2).std(axis=0) / np.sqrt(N)
        assert np.all(np.abs((x**2).mean(axis=0) - second) < 3 * se2)


class TestRun:
    def test_forced_resample_only(self, small_mixed):
        model, pql = small_mixed
        cfg = smc.SmcConfig(n_particles=200, n_stages=30, resample_threshold=0.0, seed=2)
        final, trace = smc.run(model, pql, cfg)
        assert trace.resample_stages == [25]
        assert len(trace.ess) == 30
        assert np.all(np.array(trace.ess) >= 1) and np.all(np.array(trace.ess) <= 200)
        np.testing.assert_allclose(trace.ess[25:], 200.0, rtol=1e-12)
        np.testing.assert_allclose(final.weights(), 1 / 200, rtol=1e-12)
        assert trace.acceptance_matrix.shape == (model.P, 30)
        assert np.all(final.sigma_sq > 0)
        d = trace.to_dict()
        assert d["resample_stages"] == [25] and len(d["gammas"]) == 31

    def test_threshold_triggers(self, small_mixed):
        model, pql = small_mixed
        cfg = smc.SmcConfig(n_particles=200, n_stages=10, resample_threshold=1.0, seed=2)
        _, trace = smc.run(model, pql, cfg)
        assert len(trace.resample_stages) >= 2

    def test_telescoping_without_moves(self, tiny_poisson):
        model, pql = tiny_poisson
        N = 300
        cfg = smc.SmcConfig(n_particles=N, n_stages=40, resample_threshold=0.0,
                            move_config=smc.MoveConfig.singleton(model.P, 0.0), seed=9,
                            force_final_resample=False)
        final, trace = smc.run(model, pql, cfg)
        start = smc.initialise(model, pql, N, seed=9)
        assert np.array_equal(final.nu, start.nu) and trace.resample_stages == []
        ratio = (log_pi_batch(model, start.nu, start.sigma_sq)
                 - log_pi0_batch(model, pql, start.nu, start.sigma_sq))
        expect = np.exp(ratio - numerics.log_sum_exp(ratio))
        np.testing.assert_allclose(final.weights(), expect, rtol=1e-10)

    def test_determinism_across_workers(self, small_mixed):
        model, pql = small_mixed
        out = []
        for workers in (1, 4):
            cfg = smc.SmcConfig(n_particles=300, n_stages=12, seed=5, workers=workers)
            out.append(smc.run(model, pql, cfg))
        (a, ta), (b, tb) = out
        assert np.array_equal(a.nu, b.nu) and np.array_equal(a.sigma_sq, b.sigma_sq)
        assert np.array_equal(a.log_weights, b.log_weights)
        assert ta.ess == tb.ess and np.array_equal(ta.acceptance_matrix, tb.acceptance_matrix)

    def test_validation(self, tiny_poisson):
        model, pql = tiny_poisson
        with pytest.raises(ValidationError):
            smc.run(model, pql, smc.SmcConfig(n_particles=1))
        with pytest.raises(ValidationError):
            smc.run(model, pql, smc.SmcConfig(n_particles=10, resample_threshold=1.5))
