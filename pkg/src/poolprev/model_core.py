"""Pooled-binomial probability model.

A pool of ``s`` independent individuals, each positive with probability
``p``, tests positive with probability ``1 - (1 - p)**s``. Everything here
is evaluated through ``log1p``/``expm1``/``log1mexp`` forms so that tiny
prevalences and large pools do not lose precision.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from .dataset import PoolDataset
from .errors import DomainError

LN2 = np.log(2.0)
TINY = np.nextafter(0.0, 1.0)
ONE_MINUS = np.nextafter(1.0, 0.0)


class Link(str, Enum):
    LOGIT = "logit"
    CLOGLOG = "cloglog"

    @classmethod
    def parse(cls, value) -> "Link":
        if isinstance(value, Link):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise DomainError(f"unknown link {value!r}; expected 'logit' or 'cloglog'") from None


def _ret(x):
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def _log1mexp(x):
    # no domain checks; x >= 0, returns -inf at 0
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x < LN2, np.log(-np.expm1(-x)), np.log1p(-np.exp(-x)))


def log1mexp(x):
    """``log(1 - exp(-x))`` for ``x > 0``, accurate at both ends."""
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise DomainError("log1mexp requires x > 0")
    return _ret(_log1mexp(x))


def softplus(x):
    return np.logaddexp(0.0, x)


def pool_positive_prob(p, s):
    """Probability that a pool of ``s`` individuals tests positive."""
    p = np.asarray(p, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(~((p >= 0) & (p <= 1))):
        raise DomainError("prevalence must lie in [0, 1]")
    if np.any(~(s >= 1)):
        raise DomainError("pool size must be >= 1")
    with np.errstate(divide="ignore"):
        return _ret(-np.expm1(s * np.log1p(-p)))


def link_apply(link, theta):
    """Map a probability in (0, 1) to the real line."""
    link = Link.parse(link)
    theta = np.asarray(theta, dtype=float)
    if np.any(~((theta > 0) & (theta < 1))):
        raise DomainError("link argument must lie in (0, 1)")
    if link is Link.LOGIT:
        return _ret(np.log(theta) - np.log1p(-theta))
    return _ret(np.log(-np.log1p(-theta)))


def link_inverse(link, eta):
    """Inverse link, clamped into the open unit interval."""
    link = Link.parse(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.LOGIT:
        with np.errstate(over="ignore"):
            out = 1.0 / (1.0 + np.exp(-eta))
    else:
        with np.errstate(over="ignore"):
            out = -np.expm1(-np.exp(eta))
    return _ret(np.clip(out, TINY, ONE_MINUS))


def log_one_minus_prob(link, eta):
    """``log(1 - f^{-1}(eta))`` computed without forming the probability."""
    link = Link.parse(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.LOGIT:
        return -softplus(eta)
    return -np.exp(eta)


def log_prob(link, eta):
    """``log f^{-1}(eta)``."""
    link = Link.parse(link)
    eta = np.asarray(eta, dtype=float)
    if link is Link.LOGIT:
        return -softplus(-eta)
    return _log1mexp(np.exp(eta))


# -- scalar prevalence ---------------------------------------------------


def _counts(data: PoolDataset):
    """Sufficient statistics: negatives' individual total and positive-pool sizes."""
    neg_total = float(data.sizes[~data.results].sum())
    pos_sizes, pos_counts = np.unique(data.sizes[data.results], return_counts=True)
    return neg_total, pos_sizes.astype(float), pos_counts.astype(float)


def loglik_from_counts(neg_total, pos_sizes, pos_counts, p):
    """Pooled log-likelihood from sufficient statistics (vectorised over ``p``)."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_q = np.log1p(-p)  # log(1 - p)
        out = np.zeros_like(p) if neg_total == 0 else neg_total * log_q
        if pos_sizes.size:
            a = -np.multiply.outer(log_q, pos_sizes)  # s * -log(1-p) >= 0
            out = out + (_log1mexp(a) * pos_counts).sum(axis=-1)
    return out


def pooled_log_likelihood(data: PoolDataset, p):
    """Log-likelihood of the pool results at prevalence ``p``.

    Binomial coefficients are dropped. Returns ``-inf`` for impossible
    observations (a positive pool at ``p = 0`` or a negative pool at
    ``p = 1``) and 0 for an empty dataset.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr >= 0) & (p_arr <= 1))):
        raise DomainError("prevalence must lie in [0, 1]")
    return _ret(loglik_from_counts(*_counts(data), p_arr))


def score_and_curvature(data: PoolDataset, p: float):
    """First and second derivative of :func:`pooled_log_likelihood` in ``p``."""
    if not 0 < p < 1:
        raise DomainError("score is defined for 0 < p < 1 only")
    return _score_curv(*_counts(data), p)


def _score_curv(neg_total, pos_sizes, pos_counts, p):
    log_q = np.log1p(-p)
    d1 = -neg_total / (1 - p)
    d2 = -neg_total / (1 - p) ** 2
    if pos_sizes.size:
        s = pos_sizes
        q = np.exp(s * log_q)
        phi = -np.expm1(s * log_q)
        g1 = s * np.exp((s - 1) * log_q) / phi
        g2 = -s * np.exp((s - 2) * log_q) * (s - 1 + q) / phi**2
        d1 += float((pos_counts * g1).sum())
        d2 += float((pos_counts * g2).sum())
    return float(d1), float(d2)


# -- linear-predictor parameterisation -----------------------------------


def pool_loglik_eta(eta, sizes, results, link=Link.LOGIT, derivatives=False):
    """Per-pool Bernoulli log-likelihood of the results given linear predictors.

    The per-individual prevalence is ``f^{-1}(eta)``; each pool is positive with
    probability ``1 - exp(-a)`` where ``a = -s * log(1 - f^{-1}(eta))``.

    Parameters
    ----------
    eta : ndarray
        Linear predictors; may carry leading batch axes.
    sizes, results : ndarray
        Pool sizes and 0/1 results, broadcast against the last axis of ``eta``.
    derivatives : bool
        Also return the first and second derivatives in ``eta``, and the
        Fisher information ``E[-d2]``.
    """
    link = Link.parse(link)
    eta = np.asarray(eta, dtype=float)
    s = np.asarray(sizes, dtype=float)
    y = np.asarray(results, dtype=bool)
    if link is Link.LOGIT:
        a = s * softplus(eta)
    else:
        a = s * np.exp(eta)
    with np.errstate(divide="ignore"):
        ll = np.where(y, _log1mexp(a), -a)
    if not derivatives:
        return ll
    if link is Link.LOGIT:
        sig = 0.5 * (1.0 + np.tanh(0.5 * eta))
        a1 = s * sig
        a2 = a1 * (1.0 - sig)
    else:
        a1 = a
        a2 = a
    with np.errstate(divide="ignore", over="ignore"):
        r = 1.0 / np.expm1(a)  # e^{-a} / (1 - e^{-a})
    r = np.where(np.isfinite(r), r, 0.0)
    la = np.where(y, r, -1.0)
    laa = np.where(y, -r * (1.0 + r), 0.0)
    d1 = la * a1
    d2 = laa * a1**2 + la * a2
    fisher = a1**2 * r
    return ll, d1, d2, fisher
