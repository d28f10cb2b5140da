"""Maximum-likelihood prevalence with likelihood-ratio intervals."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .dataset import PoolDataset
from .errors import DataError, DomainError, NumericalError
from .model_core import _counts, _score_curv, loglik_from_counts

EPS = 1e-12


@dataclass
class PrevalenceEstimate:
    point: float
    interval_low: float
    interval_high: float
    level: float = 0.95
    method: str = "mle_lr"
    num_pools: int = 0
    num_individuals: int = 0
    prob_absent: float | None = None
    stratum: dict = field(default_factory=dict)
    diagnostics: dict | None = None

    def __post_init__(self):
        if not (0 <= self.interval_low <= self.point <= self.interval_high <= 1):
            raise NumericalError(
                f"inconsistent estimate: {self.interval_low} <= {self.point} <= {self.interval_high}"
            )

    def as_row(self) -> dict:
        row = dict(self.stratum)
        row.update(
            method=self.method,
            estimate=self.point,
            low=self.interval_low,
            high=self.interval_high,
            level=self.level,
            num_pools=self.num_pools,
            num_individuals=self.num_individuals,
        )
        if self.prob_absent is not None:
            row["prob_absent"] = self.prob_absent
        if self.diagnostics:
            row["max_rhat"] = self.diagnostics.get("max_rhat")
            row["min_ess"] = self.diagnostics.get("min_ess")
        return row


def chi2_quantile(level: float, df: float = 1.0) -> float:
    """Chi-square quantile via the inverse regularised lower incomplete gamma."""
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    return 2.0 * float(special.gammaincinv(df / 2.0, level))


def _require(data: PoolDataset):
    if len(data) == 0:
        raise DataError("dataset contains no pools")


def mle(data: PoolDataset) -> float:
    """Maximum-likelihood prevalence.

    Exactly 0 when every pool is negative and exactly 1 when every pool is
    positive; otherwise a safeguarded Newton iteration on the score.
    """
    _require(data)
    stats = _counts(data)
    y = data.num_positive
    if y == 0:
        return 0.0
    if y == len(data):
        return 1.0
    return _mle_interior(*stats, start=_start(data))


def _start(data):
    s_bar = data.sizes.mean()
    frac = data.num_positive / len(data)
    return float(np.clip(-np.expm1(np.log1p(-frac) / s_bar), 1e-8, 1 - 1e-8))


def _mle_interior(neg_total, pos_sizes, pos_counts, start):
    # The log-likelihood is concave in p, so the score is decreasing and the
    # bracket [lo, hi] always contains the root.
    lo, hi = EPS, 1.0 - EPS
    p = start
    for _ in range(200):
        d1, d2 = _score_curv(neg_total, pos_sizes, pos_counts, p)
        if d1 > 0:
            lo = p
        else:
            hi = p
        if abs(d1) < 1e-10:
            return p
        step = -d1 / d2 if d2 < 0 else np.inf
        new = p + step
        if not lo < new < hi:
            new = 0.5 * (lo + hi)
        if abs(new - p) < 1e-12:
            return new
        p = new
    raise NumericalError("MLE iteration did not converge")


def _lr_root(f, a, b):
    return optimize.brentq(f, a, b, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


def wilks_interval(data: PoolDataset, level: float = 0.95) -> tuple[float, float]:
    """Likelihood-ratio confidence interval for the prevalence.

    Bounds solve ``2 * (l(p_hat) - l(p)) = q`` with ``q`` the chi-square(1)
    quantile at ``level``. The lower bound is 0 when all pools are negative
    and the upper bound is 1 when all pools are positive.
    """
    _require(data)
    q = chi2_quantile(level)
    stats = _counts(data)
    neg_total = stats[0]
    p_hat = mle(data)

    if p_hat == 0.0:
        # l(p) = N log(1 - p), so the upper bound has a closed form.
        return 0.0, float(-np.expm1(-q / (2.0 * neg_total)))

    l_hat = float(loglik_from_counts(*stats, p_hat))

    def dev(p):
        return 2.0 * (l_hat - float(loglik_from_counts(*stats, p))) - q

    low = _lr_root(dev, np.finfo(float).tiny, p_hat)
    if p_hat == 1.0:
        return float(low), 1.0
    top = np.nextafter(1.0, 0.0)
    high = 1.0 if dev(top) <= 0 else _lr_root(dev, p_hat, top)
    return float(low), float(high)


def estimate(data: PoolDataset, level: float = 0.95, stratum=None) -> PrevalenceEstimate:
    low, high = wilks_interval(data, level)
    return PrevalenceEstimate(
        point=mle(data),
        interval_low=low,
        interval_high=high,
        level=level,
        method="mle_lr",
        num_pools=len(data),
        num_individuals=data.num_individuals,
        stratum=dict(stratum or {}),
    )


def stratify(data: PoolDataset, strata):
    """Yield ``(stratum_dict, subset)`` per non-empty cell, lexicographically ordered."""
    strata = list(strata or [])
    if not strata:
        yield {}, data
        return
    for name in strata:
        if name not in data.columns:
            raise DataError(f"unknown stratification column {name!r}")
    cols = [data.columns[c] for c in strata]
    keys = {}
    for i, key in enumerate(zip(*cols)):
        keys.setdefault(tuple(_py(k) for k in key), []).append(i)
    for key in sorted(keys, key=_sort_key):
        yield dict(zip(strata, key)), data.subset(np.asarray(keys[key]))


def _py(v):
    return v.item() if isinstance(v, np.generic) else v


def _sort_key(key):
    return tuple((0, v, "") if isinstance(v, (int, float)) else (1, 0, str(v)) for v in key)


def estimate_stratified(data: PoolDataset, strata=(), level: float = 0.95) -> list[PrevalenceEstimate]:
    """MLE and Wilks interval independently within each stratum."""
    _require(data)
    return [estimate(sub, level, stratum) for stratum, sub in stratify(data, strata)]


__all__ = [
    "PrevalenceEstimate",
    "chi2_quantile",
    "mle",
    "wilks_interval",
    "estimate",
    "estimate_stratified",
    "stratify",
]
