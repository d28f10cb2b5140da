"""Bayesian prevalence from pooled tests.

The one-parameter posterior is integrated deterministically in
``x = logit(p)``, where it is smooth and unimodal, with adaptive composite
Gauss-Legendre quadrature. Summaries follow the usual convention for
boundary data: when every pool is positive the credible interval is
``(q(1 - level), 1]`` and when every pool is negative it is
``[0, q(level))``; otherwise it is equal-tailed.

The hierarchical estimator fits an intercept-only logistic mixed model per
stratum by MCMC. Its reported prevalence is marginal over the random
effects: for each draw, ``expit(mu + sum_l sd_l * zeta_l)`` averaged over 64
standard-normal vectors ``zeta``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special

from .dataset import PoolDataset
from .errors import DataError, DomainError, NumericalError
from .mcmc import McmcConfig, PosteriorDraws, TargetDensity, sample
from .model_core import _counts, _log1mexp, softplus
from .prevalence_freq import PrevalenceEstimate, stratify

_GL_X, _GL_W = np.polynomial.legendre.leggauss(20)
N_MARGINAL = 64
_ZETA_STREAM = 0x5EED


@dataclass(frozen=True)
class BetaPrior:
    alpha: float = 0.5
    beta: float = 0.5

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise DomainError("Beta prior shapes must be positive")


@dataclass(frozen=True)
class AbsencePrior:
    """Point mass at zero prevalence mixed with a Beta prior."""

    prob_absent_prior: float = 0.0
    continuous_part: BetaPrior = field(default_factory=BetaPrior)

    def __post_init__(self):
        if not 0 <= self.prob_absent_prior < 1:
            raise DomainError("prior probability of absence must lie in [0, 1)")


@dataclass(frozen=True)
class HierSpec:
    levels: tuple
    sd_prior_scale: object = 1.0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        if not self.levels:
            raise DomainError("at least one hierarchy level is required")
        s = np.broadcast_to(np.asarray(self.sd_prior_scale, float), (len(self.levels),))
        if np.any(~(s > 0)):
            raise DomainError("sd_prior_scale must be positive")

    def scales(self):
        return np.broadcast_to(np.asarray(self.sd_prior_scale, float), (len(self.levels),)).copy()


# -- one-dimensional posterior ---------------------------------------------


class _LogitPosterior:
    """Unnormalised log posterior density of ``x = logit(p)``."""

    def __init__(self, data: PoolDataset, prior: BetaPrior):
        if len(data) == 0:
            raise DataError("dataset contains no pools")
        self.neg, self.pos_s, self.pos_c = _counts(data)
        self.a, self.b = prior.alpha, prior.beta
        self.lbeta = special.betaln(self.a, self.b)

    def loglik(self, x):
        x = np.asarray(x, dtype=float)
        sp = softplus(x)  # -log(1 - p)
        out = -self.neg * sp
        if self.pos_s.size:
            out = out + (_log1mexp(np.multiply.outer(sp, self.pos_s)) * self.pos_c).sum(axis=-1)
        return out

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        # Beta density of p times the Jacobian p(1 - p)
        return self.loglik(x) - self.a * softplus(-x) - self.b * softplus(x) - self.lbeta


def _gl(f, a, b):
    h = 0.5 * (b - a)
    xs = 0.5 * (a + b) + h * _GL_X
    return h * (_GL_W @ f(xs))


class _Quadrature:
    """Adaptive composite Gauss-Legendre integration of ``exp(logf)`` and ``p exp(logf)``."""

    def __init__(self, logf, tol=1e-10, rounds=20):
        self.logf = logf
        grid = np.linspace(-40.0, 40.0, 1601)
        vals = logf(grid)
        if not np.any(np.isfinite(vals)):
            raise NumericalError("posterior density is not finite anywhere")
        i = int(np.nanargmax(vals))
        lo_g, hi_g = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
        if i in (0, grid.size - 1):  # mode beyond the grid: extend outward
            lo_g, hi_g = (grid[0] - 700, grid[1]) if i == 0 else (grid[-2], grid[-1] + 700)
        r = optimize.minimize_scalar(lambda x: -float(logf(x)), bounds=(lo_g, hi_g), method="bounded",
                                     options={"xatol": 1e-10})
        c = float(r.x)
        self.M = float(logf(c))
        h = 1e-3
        curv = -(float(logf(c + h)) - 2 * self.M + float(logf(c - h))) / h**2
        sd = 1.0 / np.sqrt(curv) if curv > 1e-8 else 5.0
        sd = float(np.clip(sd, 1e-6, 50.0))
        self.lo = self._edge(c, -sd)
        self.hi = self._edge(c, sd)
        inner = np.linspace(max(c - 8 * sd, self.lo), min(c + 8 * sd, self.hi), 17)
        edges = np.unique(np.concatenate([[self.lo], inner, [self.hi]]))
        self.panels = self._refine(edges, tol, rounds)

    def _edge(self, c, step):
        x = c
        for _ in range(200):
            x += step
            if float(self.logf(x)) < self.M - 60 or abs(x) > 740:
                return float(np.clip(x, -740.0, 740.0))
            step *= 1.5
        return float(np.clip(x, -740.0, 740.0))

    def _f(self, x):
        return np.exp(self.logf(x) - self.M)

    def _fp(self, x):
        return self._f(x) * special.expit(x)

    def _refine(self, edges, tol, rounds):
        panels = [(a, b) for a, b in zip(edges[:-1], edges[1:])]
        done = []
        for _ in range(rounds):
            whole = np.array([_gl(self._f, a, b) for a, b in panels])
            halves = np.array([_gl(self._f, a, 0.5 * (a + b)) + _gl(self._f, 0.5 * (a + b), b)
                               for a, b in panels])
            total = sum(v for _, _, v in done) + halves.sum()
            bad = np.abs(whole - halves) > tol * max(total, 1e-300)
            for (a, b), ok, v in zip(panels, ~bad, halves):
                if ok:
                    done.append((a, b, v))
            panels = [q for (a, b), flag in zip(panels, bad) if flag
                      for q in ((a, 0.5 * (a + b)), (0.5 * (a + b), b))]
            if not panels:
                break
        else:
            raise NumericalError("posterior quadrature did not stabilise after 20 bisection rounds")
        done.sort()
        self.edges = np.array([a for a, _, _ in done] + [done[-1][1]])
        self.masses = np.array([v for _, _, v in done])
        self.total = float(self.masses.sum())
        if not (np.isfinite(self.total) and self.total > 0):
            raise NumericalError("posterior density is not integrable")
        self.cum = np.concatenate([[0.0], np.cumsum(self.masses)]) / self.total
        return done

    @property
    def log_norm(self):
        return self.M + np.log(self.total)

    def mean(self):
        return sum(_gl(self._fp, a, b) for a, b, _ in self.panels) / self.total

    def quantile(self, q):
        """``q``-quantile of ``p``."""
        if q <= 0:
            return 0.0
        if q >= 1:
            return 1.0
        k = int(np.clip(np.searchsorted(self.cum, q) - 1, 0, self.masses.size - 1))
        a, b = self.edges[k], self.edges[k + 1]
        base = self.cum[k]

        def g(t):
            return base + _gl(self._f, a, t) / self.total - q

        ga, gb = g(a), g(b)
        if ga >= 0:
            x = a
        elif gb <= 0:
            x = b
        else:
            x = optimize.brentq(g, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps)
        return float(special.expit(x))


def _summary(data, quad, level):
    y, n = data.num_positive, len(data)
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    a = 1 - level
    if y == n:
        low, high = quad.quantile(a), 1.0
    elif y == 0:
        low, high = 0.0, quad.quantile(level)
    else:
        low, high = quad.quantile(a / 2), quad.quantile(1 - a / 2)
    return float(np.clip(quad.mean(), low, high)), low, high


def posterior_1d(data: PoolDataset, prior: BetaPrior | None = None, level: float = 0.95,
                 stratum=None) -> PrevalenceEstimate:
    """Posterior mean and credible interval of the prevalence under a Beta prior."""
    prior = prior or BetaPrior()
    quad = _Quadrature(_LogitPosterior(data, prior))
    point, low, high = _summary(data, quad, level)
    return PrevalenceEstimate(point, low, high, level, "bayes_quadrature", len(data),
                              data.num_individuals, stratum=dict(stratum or {}))


def log_marginal_likelihood(data: PoolDataset, prior: BetaPrior | None = None) -> float:
    """``log m`` with ``m`` the integral of likelihood times Beta prior density."""
    return float(_Quadrature(_LogitPosterior(data, prior or BetaPrior())).log_norm)


def posterior_with_absence(data: PoolDataset, prior: AbsencePrior, level: float = 0.95,
                           stratum=None) -> PrevalenceEstimate:
    """Spike-and-slab posterior; the summary is conditional on presence."""
    if not prior.prob_absent_prior > 0:
        raise DomainError("prob_absent_prior must be positive")
    post = _LogitPosterior(data, prior.continuous_part)
    quad = _Quadrature(post)
    point, low, high = _summary(data, quad, level)
    pi0 = prior.prob_absent_prior
    if data.num_positive > 0:
        absent = 0.0
    else:
        # likelihood at p = 0 is one; m = exp(log_norm)
        absent = 1.0 / (1.0 + (1.0 - pi0) / pi0 * np.exp(quad.log_norm))
    return PrevalenceEstimate(point, low, high, level, "bayes_quadrature", len(data),
                              data.num_individuals, prob_absent=float(absent),
                              stratum=dict(stratum or {}))


def estimate_stratified(data: PoolDataset, strata=(), prior=None, level=0.95):
    """Bayesian estimate per stratum; ``prior`` may be a BetaPrior or AbsencePrior."""
    if len(data) == 0:
        raise DataError("dataset contains no pools")
    out = []
    for stratum, sub in stratify(data, strata):
        if isinstance(prior, AbsencePrior) and prior.prob_absent_prior > 0:
            out.append(posterior_with_absence(sub, prior, level, stratum))
        else:
            beta = prior.continuous_part if isinstance(prior, AbsencePrior) else prior
            out.append(posterior_1d(sub, beta, level, stratum))
    return out


def mcmc_prevalence(data: PoolDataset, prior: BetaPrior | None = None,
                    cfg: McmcConfig | None = None) -> tuple[np.ndarray, PosteriorDraws]:
    """Sample the one-parameter posterior with the MCMC engine; returns prevalence draws."""
    post = _LogitPosterior(data, prior or BetaPrior())
    target = TargetDensity(1, lambda x: float(post(x[0])), ["logit_p"],
                           batch_log_density=lambda th: post(th[:, 0]))
    start = np.clip(data.num_positive / len(data), 1e-3, 1 - 1e-3)
    draws = sample(target, [special.logit(start)], cfg)
    return special.expit(draws.draws[:, :, 0]), draws


# -- hierarchical ----------------------------------------------------------


def _stratum_seed(seed, i):
    return int(np.random.SeedSequence([int(seed), int(i)]).generate_state(1)[0])


def hier_prevalence(data: PoolDataset, hier: HierSpec, prior: BetaPrior | None = None, strata=(),
                    level: float = 0.95, mcmc_cfg: McmcConfig | None = None):
    """Marginal population prevalence per stratum from a nested random-intercept model."""
    from .regression.bayes import BayesPriors, PooledGLMMPosterior, run_posterior
    from .regression.design import build_design
    from .regression.formula import ModelFormula, RandomTerm

    prior = prior or BetaPrior()
    cfg = mcmc_cfg or McmcConfig()
    if len(data) == 0:
        raise DataError("dataset contains no pools")
    for c in hier.levels:
        if c not in data.columns:
            raise DataError(f"unknown hierarchy column {c!r}")
    terms = tuple(RandomTerm(tuple(hier.levels[:i + 1])) for i in range(len(hier.levels)))
    formula = ModelFormula("Result", (), terms, True)
    priors = BayesPriors(sd_scale=hier.scales(), intercept_beta=(prior.alpha, prior.beta))
    out = []
    for i, (stratum, sub) in enumerate(stratify(data, strata)):
        seed = _stratum_seed(cfg.seed, i)
        design = build_design(formula, sub, min_groups=1).compressed()
        post = PooledGLMMPosterior(design, "logit", priors)
        run_cfg = McmcConfig(cfg.chains, cfg.warmup_iters, cfg.sampling_iters, seed,
                             cfg.target_accept, cfg.initial_jitter_scale)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            draws = run_posterior(post, run_cfg)
        flat = draws.flat()
        mu = flat[:, 0]
        sds = np.column_stack([np.exp(flat[:, t.log_sd[0]]) for t in post.terms])
        rng = np.random.default_rng(np.random.SeedSequence([seed, _ZETA_STREAM]))
        zeta = rng.standard_normal((mu.size, N_MARGINAL, sds.shape[1]))
        prev = special.expit(mu[:, None] + np.einsum("smk,sk->sm", zeta, sds)).mean(axis=1)
        point, low, high = _draw_summary(prev, sub, level)
        diag = draws.diagnostics()
        msgs = list(draws.warnings)
        if diag["max_rhat"] > 1.05:
            msgs.append(f"max split R-hat {diag['max_rhat']:.3f} exceeds 1.05")
        if not diag["min_ess"] >= 100:
            msgs.append(f"min bulk ESS {diag['min_ess']:.0f} is below 100")
        diag["warnings"] = msgs
        diag["sd_posterior_mean"] = sds.mean(axis=0).tolist()
        out.append(PrevalenceEstimate(point, low, high, level, "bayes_mcmc_hier", len(sub),
                                      sub.num_individuals, stratum=stratum, diagnostics=diag))
    return out


def _draw_summary(prev, data, level):
    a = 1 - level
    y, n = data.num_positive, len(data)
    if y == n:
        low, high = float(np.quantile(prev, a)), 1.0
    elif y == 0:
        low, high = 0.0, float(np.quantile(prev, level))
    else:
        low, high = (float(v) for v in np.quantile(prev, [a / 2, 1 - a / 2]))
    return float(np.clip(prev.mean(), low, high)), low, high
