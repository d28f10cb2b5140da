import warnings

import numpy as np
import pytest
from scipy import special, stats

from poolprev.errors import DomainError, NumericalError
from poolprev.mcmc import (
    McmcConfig,
    TargetDensity,
    bulk_ess,
    ess_mean,
    mcse_mean,
    sample,
    split_rhat,
)


def normal_target(dim=1):
    return TargetDensity(dim, lambda x: -0.5 * float(x @ x),
                         batch_log_density=lambda th: -0.5 * np.sum(th * th, axis=1))


class TestSampler:
    def test_standard_normal(self):
        d = sample(normal_target(), [0.0], McmcConfig(seed=1))
        x = d.draws[:, :, 0]
        assert abs(x.mean()) < 4 / np.sqrt(bulk_ess(x))
        assert x.var() == pytest.approx(1.0, rel=0.10)
        assert d.draws.shape == (4, 1000, 1)
        assert np.all(d.rhat >= 1 - 1e-9)

    def test_beta_on_logit_scale(self):
        a, b = 1.5, 0.5
        # density of x = logit(p) includes the Jacobian p(1 - p)
        f = lambda x: a * -np.logaddexp(0, -x) + b * -np.logaddexp(0, x)  # noqa: E731
        t = TargetDensity(1, lambda x: float(f(x[0])), batch_log_density=lambda th: f(th[:, 0]))
        d = sample(t, [0.0], McmcConfig(seed=2, warmup_iters=2000, sampling_iters=4000))
        p = special.expit(d.draws[:, :, 0])
        assert abs(p.mean() - 0.75) < 3 * mcse_mean(p)

    def test_correlated_adaptation(self):
        prec = np.linalg.inv(np.array([[1.0, 0.9], [0.9, 1.0]]))
        t = TargetDensity(2, lambda x: -0.5 * float(x @ prec @ x),
                          batch_log_density=lambda th: -0.5 * np.einsum("ci,ij,cj->c", th, prec, th))
        d = sample(t, [0.0, 0.0], McmcConfig(seed=3))
        cov = d.proposal_covariances["all"]
        cov = cov[0] if cov.ndim == 3 else cov
        assert cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]) > 0.5

    def test_deterministic(self):
        cfg = McmcConfig(seed=7, warmup_iters=200, sampling_iters=200)
        a = sample(normal_target(3), np.zeros(3), cfg)
        b = sample(normal_target(3), np.zeros(3), cfg)
        assert np.array_equal(a.draws, b.draws)
        c = sample(normal_target(3), np.zeros(3), McmcConfig(seed=8, warmup_iters=200,
                                                            sampling_iters=200))
        assert not np.array_equal(a.draws, c.draws)

    def test_scalar_density_path(self):
        t = TargetDensity(1, lambda x: -0.5 * float(x[0] ** 2))
        d = sample(t, [0.0], McmcConfig(seed=1, warmup_iters=300, sampling_iters=300))
        assert d.draws.shape == (4, 300, 1)

    def test_bad_start(self):
        t = TargetDensity(1, lambda x: -np.inf)
        with pytest.raises(NumericalError):
            sample(t, [0.0])

    def test_stuck_chain_warning(self):
        t = TargetDensity(1, lambda x: 0.0 if x[0] == 0.0 else -np.inf)
        with pytest.warns(RuntimeWarning, match="stuck"):
            d = sample(t, [0.0], McmcConfig(seed=1, warmup_iters=100, sampling_iters=100))
        assert d.warnings

    def test_config_validation(self):
        with pytest.raises(DomainError):
            McmcConfig(chains=1)
        with pytest.raises(DomainError):
            McmcConfig(warmup_iters=50)
        with pytest.raises(DomainError):
            McmcConfig(target_accept=1.0)

    def test_stationary_distribution(self):
        # piecewise-constant density on [0, 10) with cell weights proportional to k + 1
        w = np.arange(1, 11, dtype=float)
        logw = np.log(w / w.sum())

        def f(th):
            x = th[:, 0]
            k = np.floor(x).astype(int)
            inside = (x >= 0) & (x < 10)
            return np.where(inside, logw[np.clip(k, 0, 9)], -np.inf)

        t = TargetDensity(1, lambda x: float(f(x[None])[0]), batch_log_density=f)
        d = sample(t, [5.0], McmcConfig(seed=11, warmup_iters=2000, sampling_iters=60000))
        x = d.draws[:, :, 0]
        # thin well beyond the autocorrelation time so the counts are near-independent
        lag = int(np.ceil(4 * x.size / ess_mean(x)))
        kept = x[:, ::lag].ravel()
        counts = np.bincount(np.floor(kept).astype(int), minlength=10)
        p = stats.chisquare(counts, kept.size * w / w.sum()).pvalue
        assert kept.size > 1000
        assert p > 0.001


class TestDiagnostics:
    def test_iid(self):
        for seed in range(20):
            x = np.random.default_rng(seed).standard_normal((4, 1000))
            assert split_rhat(x) < 1.01
            assert bulk_ess(x) > 1000

    def test_separated_chains(self):
        rng = np.random.default_rng(0)
        x = np.stack([rng.standard_normal(1000), 5 + rng.standard_normal(1000)])
        # halves {0, 0, 5, 5}: B/n = 25/3, W = 1, so R-hat is about sqrt(1 + 25/3) = 3.06
        r = split_rhat(x)
        assert r > 2
        assert r == pytest.approx(np.sqrt(1 + 25 / 3), rel=0.05)

    def test_constant(self):
        assert split_rhat(np.ones((4, 100)), return_flag=True) == (1.0, True)
        assert np.isnan(bulk_ess(np.ones((4, 100))))

    def test_permutation_invariance(self):
        x = np.cumsum(np.random.default_rng(5).standard_normal((4, 500)), axis=1) * 0.1
        perm = x[[2, 0, 3, 1]]
        assert split_rhat(perm) == pytest.approx(split_rhat(x), rel=1e-12)
        assert bulk_ess(perm) == pytest.approx(bulk_ess(x), rel=1e-12)
        assert ess_mean(perm) == pytest.approx(ess_mean(x), rel=1e-12)

    def test_insufficient(self):
        with pytest.raises(DomainError):
            split_rhat(np.zeros((1, 100)))
        with pytest.raises(DomainError):
            bulk_ess(np.zeros((4, 6)))

    def test_autocorrelated_ess_below_n(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((4, 2000))
        x = np.zeros_like(z)
        for t in range(1, 2000):
            x[:, t] = 0.9 * x[:, t - 1] + z[:, t]
        # AR(1) with phi = 0.9 has integrated autocorrelation time 19
        assert ess_mean(x) == pytest.approx(8000 / 19, rel=0.35)
