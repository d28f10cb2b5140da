import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poolprev.dataset import PoolDataset
from poolprev.errors import DataError, DomainError
from poolprev.model_core import pooled_log_likelihood, score_and_curvature
from poolprev.prevalence_freq import (
    chi2_quantile,
    estimate,
    estimate_stratified,
    mle,
    stratify,
    wilks_interval,
)

Q95 = 3.841458820694124


def ds(sizes, results, **cols):
    return PoolDataset(np.asarray(sizes), np.asarray(results), cols, covariate_columns=tuple(cols))


def equal(n, y, s):
    return ds([s] * n, [1] * y + [0] * (n - y))


def deviance(data, p):
    return 2 * (pooled_log_likelihood(data, mle(data)) - pooled_log_likelihood(data, p))


def test_chi2_quantile():
    assert chi2_quantile(0.95) == pytest.approx(Q95, rel=1e-14)
    assert round(chi2_quantile(0.95), 6) == 3.841459
    with pytest.raises(DomainError):
        chi2_quantile(1.0)


class TestMle:
    def test_boundaries(self):
        assert mle(equal(20, 0, 25)) == 0.0
        assert mle(equal(4, 4, 3)) == 1.0

    def test_equal_pool_example(self):
        assert mle(equal(10, 3, 25)) == pytest.approx(0.014165706424945608, abs=1e-15)

    def test_mixed_sizes_grid_oracle(self):
        d = ds([25, 25, 10, 5], [1, 0, 0, 1])
        grid = np.arange(1, 10**6) / 10**6
        best = grid[np.argmax(pooled_log_likelihood(d, grid))]
        assert mle(d) == pytest.approx(best, abs=1e-6)

    def test_empty(self):
        with pytest.raises(DataError):
            mle(ds([], []))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 40), st.booleans()), min_size=2, max_size=15))
    def test_stationary(self, pool_list):
        d = ds([s for s, _ in pool_list], [int(r) for _, r in pool_list])
        p = mle(d)
        if 0 < p < 1:
            assert abs(score_and_curvature(d, p)[0]) < 1e-6 * max(1.0, d.num_individuals)

    def test_replicating_pools_keeps_mle(self):
        # each replicated pool adds its own score term again, so the score at
        # p_hat stays zero
        base = ds([25] * 10 + [5] * 4, [1, 1, 1] + [0] * 7 + [1, 0, 0, 0])
        p = mle(base)
        both = ds(np.tile(base.sizes, 3), np.tile(base.results.astype(int), 3))
        assert mle(both) == pytest.approx(p, abs=1e-12)
        assert abs(score_and_curvature(both, p)[0]) < 1e-8


class TestWilks:
    def test_all_negative_closed_form(self):
        d = equal(20, 0, 25)
        low, high = wilks_interval(d)
        assert low == 0.0
        assert high == -math.expm1(-Q95 / 1000)
        assert high == pytest.approx(0.0038340898566357544, rel=1e-12)

    def test_equal_pool_endpoints(self):
        d = equal(10, 3, 25)
        low, high = wilks_interval(d)
        assert low < mle(d) < high
        for b in (low, high):
            assert abs(deviance(d, b) - Q95) < 1e-8
        # the deviance crosses q exactly once on each side
        grid = np.linspace(1e-6, 0.2, 20001)
        inside = grid[deviance(d, grid) <= Q95]
        assert inside.min() == pytest.approx(low, abs=2e-5)
        assert inside.max() == pytest.approx(high, abs=2e-5)

    def test_single_positive_singleton(self):
        low, high = wilks_interval(ds([1], [1]))
        assert high == 1.0
        assert low == pytest.approx(math.exp(-Q95 / 2), rel=1e-10)
        assert round(low, 4) == 0.1465

    def test_nested_levels(self):
        d = ds([25, 25, 10, 5, 5, 1], [1, 0, 0, 1, 0, 0])
        prev = None
        for lv in (0.5, 0.9, 0.95, 0.99):
            low, high = wilks_interval(d, lv)
            assert low <= mle(d) <= high
            if prev is not None:
                assert low < prev[0] and high > prev[1]
            prev = (low, high)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.integers(1, 30), st.booleans()), min_size=1, max_size=20))
    def test_endpoint_residual(self, pool_list):
        d = ds([s for s, _ in pool_list], [int(r) for _, r in pool_list])
        low, high = wilks_interval(d)
        assert 0 <= low <= mle(d) <= high <= 1
        for b in (low, high):
            if 0 < b < 1:
                assert abs(deviance(d, b) - Q95) < 1e-8


class TestStratified:
    def test_no_strata(self):
        d = equal(10, 3, 25)
        (e,) = estimate_stratified(d, [])
        assert (e.point, e.interval_low, e.interval_high) == (mle(d), *wilks_interval(d))
        assert e.stratum == {}

    def test_matches_subsets(self):
        d = ds([25, 25, 10, 5, 5, 1, 3, 3], [1, 0, 0, 1, 0, 0, 1, 1],
               Region=np.array(["B", "A", "B", "A", "C", "C", "A", "B"], dtype=object),
               Year=np.array([0, 1, 0, 1, 0, 0, 1, 1.0]))
        ests = estimate_stratified(d, ["Region", "Year"])
        keys = [(e.stratum["Region"], e.stratum["Year"]) for e in ests]
        assert keys == sorted(keys)
        for e, (_, sub) in zip(ests, stratify(d, ["Region", "Year"])):
            ref = estimate(sub)
            assert (e.point, e.interval_low, e.interval_high) == (ref.point, ref.interval_low,
                                                                  ref.interval_high)
            assert e.num_pools == len(sub)

    def test_unknown_column(self):
        with pytest.raises(DataError, match="Village"):
            estimate_stratified(equal(3, 1, 5), ["Village"])

    def test_default_data_rows(self, default_data):
        assert len(estimate_stratified(default_data, ["Region"])) == 3
        assert len(estimate_stratified(default_data, ["Region", "Year"])) == 9
