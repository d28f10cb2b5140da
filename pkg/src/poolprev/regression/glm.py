"""Fixed-effect pooled regression by Newton-Raphson."""

from __future__ import annotations

import numpy as np

from ..errors import DataError, NumericalError
from ..model_core import Link, link_apply, pool_loglik_eta
from .design import Design, build_design
from .formula import parse_formula


def _start(X, sizes, results, weights, link):
    # constant linear predictor at the pooled MLE for a common prevalence
    from ..dataset import PoolDataset
    from ..prevalence_freq import mle

    frac = np.clip(mle(PoolDataset(sizes.astype(int), results.astype(int))), 1e-4, 1 - 1e-4)
    target = np.full(X.shape[0], link_apply(link, frac))
    beta, *_ = np.linalg.lstsq(X, target, rcond=None)
    return beta


def loglik_parts(beta, X, sizes, results, weights, link, offset=None):
    eta = X @ beta
    if offset is not None:
        eta = eta + offset
    ll, d1, d2, fisher = pool_loglik_eta(eta, sizes, results, link, derivatives=True)
    return float(weights @ ll), X.T @ (weights * d1), (X * (weights * d2)[:, None]).T @ X, \
        (X * (weights * fisher)[:, None]).T @ X


def newton_fit(X, sizes, results, weights=None, link=Link.LOGIT, offset=None, beta0=None,
               tol=1e-8, max_iter=100):
    """Maximise the pooled log-likelihood in ``beta``.

    Newton steps use the observed Hessian when it is negative definite and
    the expected information otherwise, with step halving until the
    log-likelihood does not decrease.

    Returns ``(beta, covariance, loglik, iterations)``; the covariance is the
    inverse observed information at the optimum.
    """
    link = Link.parse(link)
    weights = np.ones(X.shape[0]) if weights is None else weights
    beta = _start(X, sizes, results, weights, link) if beta0 is None else np.array(beta0, float)
    ll, g, H, F = loglik_parts(beta, X, sizes, results, weights, link, offset)
    for it in range(1, max_iter + 1):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < tol:
            break
        try:
            L = np.linalg.cholesky(-H)
            step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        except np.linalg.LinAlgError:
            step = np.linalg.solve(F + 1e-10 * np.eye(F.shape[0]), g)
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            c_ll, c_g, c_H, c_F = loglik_parts(cand, X, sizes, results, weights, link, offset)
            if np.isfinite(c_ll) and c_ll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise NumericalError(f"line search failed; gradient norm {gnorm:.3g}")
        beta, ll, g, H, F = cand, c_ll, c_g, c_H, c_F
    else:
        gnorm = float(np.max(np.abs(g)))
        if gnorm >= tol:
            raise NumericalError(
                f"Newton iteration did not converge in {max_iter} iterations "
                f"(gradient norm {gnorm:.3g}); the data may be separated"
            )
        it = max_iter
    try:
        cov = np.linalg.inv(-H)
    except np.linalg.LinAlgError:
        raise NumericalError("observed information is singular") from None
    cov = 0.5 * (cov + cov.T)
    return beta, cov, ll, it


def bernoulli_offset_glm(X, y, offset, tol=1e-12, max_iter=100):
    """Plain Bernoulli GLM with complementary log-log link and an offset, by IRLS.

    Kept separate from :func:`newton_fit` so the two can be checked against
    each other: a pooled cloglog model is this GLM with ``offset = log(s)``.
    """
    y = np.asarray(y, dtype=float)
    beta = np.zeros(X.shape[1])
    mu0 = np.clip(y.mean(), 1e-3, 1 - 1e-3)
    eta = np.full(y.shape, np.log(-np.log1p(-mu0)))
    for _ in range(max_iter):
        e = np.exp(eta)
        mu = np.clip(-np.expm1(-e), 1e-15, 1 - 1e-15)
        dmu = e * np.exp(-e)
        w = dmu**2 / (mu * (1 - mu))
        z = eta - offset + (y - mu) / dmu
        WX = X * w[:, None]
        new = np.linalg.solve(X.T @ WX, WX.T @ z)
        eta = X @ new + offset
        if np.max(np.abs(new - beta)) < tol * (1 + np.max(np.abs(new))):
            return new
        beta = new
    raise NumericalError("IRLS did not converge")


def _check_separation(d, beta, cov, link, names, limit=100.0):
    # the gradient also vanishes along a separating direction as beta drifts
    # off to infinity, so flag standardized standard errors that explode
    scale = np.where(np.ptp(d.X, axis=0) > 0, d.X.std(axis=0), 1.0)
    std_se = np.sqrt(np.clip(np.diag(cov), 0, None)) * scale
    worst = int(np.argmax(std_se))
    if std_se[worst] > limit:
        _, g, _, _ = loglik_parts(beta, d.X, d.sizes, d.results, d.weights, link)
        raise NumericalError(
            f"coefficient {names[worst]} is not identified (standard error "
            f"{np.sqrt(cov[worst, worst]):.3g}; gradient norm {np.max(np.abs(g)):.3g}); "
            "the data look separated"
        )


def fit_glm(formula, data, link=None, level=0.95):
    """Fixed-effects pooled regression.

    ``formula`` may be text or a parsed formula; ``link`` overrides the
    formula's link when given.
    """
    from .model import FittedModel, observed_frame

    f = parse_formula(formula, link or "logit") if isinstance(formula, str) else formula
    if link is not None and not isinstance(formula, str):
        f = type(f)(f.response, f.fixed_terms, f.random_terms, f.intercept, Link.parse(link), f.text)
    if f.random_terms:
        raise DataError("fit_glm does not take random-effect terms; use fit_glmm_laplace")
    design = build_design(f, data)
    if design.n_fixed == 0:
        raise DataError("model has no fixed-effect columns")
    d = design.compressed()
    beta, cov, ll, iters = newton_fit(d.X, d.sizes, d.results, d.weights, f.link)
    _check_separation(d, beta, cov, f.link, design.info.column_names)
    return FittedModel(
        formula=f,
        framework="frequentist",
        design_info=design.info,
        coefficients=beta,
        covariance=cov,
        random_effects=[],
        fit_metadata={"loglik": ll, "iterations": iters, "num_pools": len(data),
                      "link": f.link.value, "warnings": []},
        level=level,
        frame=observed_frame(f, data),
    )
