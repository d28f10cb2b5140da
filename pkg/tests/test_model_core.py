import itertools
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolprev.dataset import PoolDataset
from poolprev.errors import DomainError
from poolprev.model_core import (
    Link,
    link_apply,
    link_inverse,
    log1mexp,
    pool_loglik_eta,
    pool_positive_prob,
    pooled_log_likelihood,
    score_and_curvature,
)
from poolprev.prevalence_freq import mle

# 1 - 0.98**25 and related values at 50-digit precision
PHI_25_002 = 0.39653527022110309150
LL_PPN = -2.3550482588660273999634647


def ds(sizes, results):
    return PoolDataset(np.asarray(sizes), np.asarray(results))


class TestPoolPositiveProb:
    def test_examples(self):
        assert pool_positive_prob(0.0, 25) == 0.0
        assert pool_positive_prob(0.3, 1) == pytest.approx(0.3, abs=1e-16)
        assert pool_positive_prob(0.02, 25) == pytest.approx(PHI_25_002, rel=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            pool_positive_prob(-0.1, 5)
        with pytest.raises(DomainError):
            pool_positive_prob(0.1, 0.5)

    def test_grid_properties(self):
        p = np.linspace(0, 1, 201)
        for s in (1, 2, 5, 25, 50):
            phi = pool_positive_prob(p, s)
            assert np.all(np.diff(phi) >= 0)
            # strict wherever 1 - phi is resolvable in double precision
            resolvable = phi < 1 - 1e-12
            assert np.all(np.diff(phi[resolvable]) > 0)
            assert phi[0] == 0 and phi[-1] == 1
        np.testing.assert_allclose(pool_positive_prob(p, 1), p, atol=1e-15)
        interior = p[1:-1]
        assert np.all(pool_positive_prob(interior, 6) > pool_positive_prob(interior, 5))

    def test_tiny_prevalence_keeps_precision(self):
        assert pool_positive_prob(1e-18, 10) == pytest.approx(1e-17, rel=1e-12)


class TestLog1mexp:
    def test_examples(self):
        assert log1mexp(math.log(2)) == pytest.approx(math.log(0.5), rel=1e-15)
        assert log1mexp(50.0) == pytest.approx(-1.9287498479639177830e-22, rel=1e-13)
        assert log1mexp(1e-10) == pytest.approx(-23.025850929990456840, rel=1e-13)

    def test_domain(self):
        for bad in (0.0, -1.0):
            with pytest.raises(DomainError):
                log1mexp(bad)

    def test_extended_precision(self):
        xs = np.geomspace(1e-12, 700, 400)
        got = log1mexp(xs)
        with mpmath.workdps(60):
            want = np.array([float(mpmath.log1p(-mpmath.exp(-mpmath.mpf(float(x))))) for x in xs])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)


class TestLikelihood:
    def test_all_negative(self):
        d = ds([25, 10, 5], [0, 0, 0])
        assert pooled_log_likelihood(d, 0.01) == pytest.approx(40 * math.log(0.99), rel=1e-14)

    def test_impossible(self):
        assert pooled_log_likelihood(ds([5, 5], [1, 0]), 0.0) == -np.inf
        assert pooled_log_likelihood(ds([5, 5], [1, 0]), 1.0) == -np.inf

    def test_empty(self):
        assert pooled_log_likelihood(ds([], []), 0.3) == 0.0

    def test_three_pool_example(self):
        d = ds([25, 25, 25], [1, 1, 0])
        assert pooled_log_likelihood(d, 0.02) == pytest.approx(LL_PPN, rel=1e-13)

    def test_brute_force_oracle(self):
        grid = np.arange(1, 100) / 100.0
        worst = 0.0
        for n in range(1, 5):
            for sizes in itertools.product(range(1, 6), repeat=n):
                for res in itertools.product((0, 1), repeat=n):
                    got = pooled_log_likelihood(ds(sizes, res), grid)
                    want = np.zeros_like(grid)
                    for s, r in zip(sizes, res):
                        neg = (1 - grid) ** s
                        want += np.log(1 - neg) if r else np.log(neg)
                    worst = max(worst, float(np.max(np.abs(got - want))))
        assert worst < 1e-10


class TestScore:
    def test_all_negative(self):
        d = ds([25, 25], [0, 0])
        d1, _ = score_and_curvature(d, 0.1)
        assert d1 == pytest.approx(-50 / 0.9, rel=1e-14)

    def test_domain(self):
        with pytest.raises(DomainError):
            score_and_curvature(ds([5], [1]), 0.0)

    def test_zero_at_mle(self):
        d = ds([25, 25, 10, 5, 1, 3], [1, 0, 0, 1, 0, 1])
        assert abs(score_and_curvature(d, mle(d))[0]) < 1e-8

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 30), st.booleans()), min_size=1, max_size=12),
           st.floats(0.01, 0.6))
    def test_finite_differences(self, pool_list, p):
        d = ds([s for s, _ in pool_list], [int(r) for _, r in pool_list])
        h = 1e-6
        f = lambda x: pooled_log_likelihood(d, x)  # noqa: E731
        d1, d2 = score_and_curvature(d, p)
        fd1 = (f(p + h) - f(p - h)) / (2 * h)
        g = lambda x: score_and_curvature(d, x)[0]  # noqa: E731
        fd2 = (g(p + h) - g(p - h)) / (2 * h)
        assert d1 == pytest.approx(fd1, rel=1e-5, abs=1e-6)
        assert d2 == pytest.approx(fd2, rel=1e-5, abs=1e-6)


class TestLinks:
    def test_logit(self):
        assert link_apply("logit", 0.5) == 0.0
        assert link_inverse("logit", 0.0) == 0.5

    def test_cloglog_exact(self):
        assert link_apply(Link.CLOGLOG, 1 - math.exp(-1)) == pytest.approx(0.0, abs=1e-15)

    def test_cloglog_offset_identity(self):
        lhs = link_apply("cloglog", pool_positive_prob(0.01, 25))
        assert lhs == pytest.approx(math.log(25) + link_apply("cloglog", 0.01), abs=1e-12)
        # beyond p = 0.2 with s = 50, 1 - phi falls below 1e-5 and the identity is
        # limited by double-precision cancellation rather than the formulas
        p = np.linspace(1e-4, 0.2, 120)
        for s in (1, 2, 7, 25, 50):
            resid = (link_apply("cloglog", pool_positive_prob(p, s)) - link_apply("cloglog", p)
                     - math.log(s))
            assert np.max(np.abs(resid)) < 1e-10

    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_round_trip(self, link):
        eta = np.linspace(-30, 3.5 if link == "cloglog" else 30, 301)
        p = link_inverse(link, eta)
        assert np.all((p > 0) & (p < 1))
        mask = (p > 1e-300) & (p < 1 - 1e-12)
        np.testing.assert_allclose(link_inverse(link, link_apply(link, p[mask])), p[mask],
                                   rtol=1e-12)

    def test_inverse_clamps(self):
        assert 0 < link_inverse("logit", -1e4) < 1e-300
        assert link_inverse("logit", 1e4) < 1.0
        assert link_inverse("cloglog", 50.0) < 1.0

    def test_bad_link_and_domain(self):
        with pytest.raises(DomainError):
            Link.parse("probit")
        with pytest.raises(DomainError):
            link_apply("logit", 1.0)


class TestEtaLikelihood:
    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_matches_scalar(self, link):
        rng = np.random.default_rng(3)
        sizes = rng.integers(1, 30, 40)
        res = rng.integers(0, 2, 40)
        p = 0.03
        eta = np.full(40, link_apply(link, p))
        got = pool_loglik_eta(eta, sizes, res, link).sum()
        assert got == pytest.approx(pooled_log_likelihood(ds(sizes, res), p), rel=1e-12)

    @pytest.mark.parametrize("link", ["logit", "cloglog"])
    def test_derivatives(self, link):
        rng = np.random.default_rng(4)
        sizes = rng.integers(1, 30, 50).astype(float)
        res = rng.integers(0, 2, 50)
        eta = rng.uniform(-6, 0.5, 50)
        ll, d1, d2, fisher = pool_loglik_eta(eta, sizes, res, link, derivatives=True)
        h = 1e-5
        lp = pool_loglik_eta(eta + h, sizes, res, link)
        lm = pool_loglik_eta(eta - h, sizes, res, link)
        np.testing.assert_allclose(d1, (lp - lm) / (2 * h), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(d2, (lp - 2 * ll + lm) / h**2, rtol=1e-4, atol=1e-5)
        assert np.all(fisher >= 0)
