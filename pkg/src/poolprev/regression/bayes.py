"""Bayesian pooled mixed-effect regression.

Parameters are laid out as ``[beta, variance parameters, u]``. Each random
term contributes ``log sd`` per component (plus ``atanh`` of the
correlation for two-component terms) and a ``groups x components`` block of
effects ``u``. The posterior is explored with a Metropolis-within-Gibbs
sweep built from the generic updates in :mod:`poolprev.mcmc`:

* a joint adaptive random walk on ``beta``;
* per-coordinate random walks on the effects of each term component,
  which are conditionally independent given everything else;
* for each term, a random walk on its variance parameters given ``u`` and
  a rescaling move that scales ``sd`` and ``u`` together, so the sampler
  stays mobile whether the data pin down ``u`` or not;
* exact-prior line moves along directions that leave every linear
  predictor unchanged (an intercept traded against a term's effects, or a
  coarse group's effect traded against its nested subgroups). These
  remove the slow ridge between fixed effects and the group means of
  random effects.

The linear predictor and per-row log-likelihood of every chain are cached
and updated incrementally from accepted moves.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from ..errors import DataError, DomainError
from ..mcmc import (GroupedRandomWalk, McmcConfig, RandomWalkBlock, TargetDensity, Update,
                    _accept, _accept_prob, sample)
from ..model_core import Link, _log1mexp, pool_loglik_eta
from .design import INTERCEPT, Design, build_design, nested_in, parent_map
from .formula import parse_formula
from .glm import newton_fit

LOG2PI = np.log(2 * np.pi)


@dataclass
class BayesPriors:
    """Prior settings.

    ``sd_scale`` is the half-normal scale for every random-effect standard
    deviation, or a sequence with one scale per random term. Setting
    ``intercept_beta = (a, b)`` replaces the normal intercept prior by a
    Beta(a, b) prior on the baseline prevalence ``f^{-1}(intercept)``.
    """

    coef_sd: float = 2.5
    intercept_sd: float = 5.0
    sd_scale: object = 1.0
    intercept_beta: tuple | None = None

    def __post_init__(self):
        if self.coef_sd <= 0 or self.intercept_sd <= 0:
            raise DomainError("prior standard deviations must be positive")
        if self.intercept_beta is not None and min(self.intercept_beta) <= 0:
            raise DomainError("Beta prior shapes must be positive")

    def scales(self, n_terms):
        s = np.broadcast_to(np.asarray(self.sd_scale, dtype=float), (n_terms,))
        if np.any(s <= 0):
            raise DomainError("sd_scale must be positive")
        return s.copy()

    def to_dict(self):
        return {"coef_sd": self.coef_sd, "intercept_sd": self.intercept_sd,
                "sd_scale": np.asarray(self.sd_scale, float).tolist(),
                "intercept_beta": None if self.intercept_beta is None else list(self.intercept_beta)}


def _log_1m_tanh2(a):
    a = np.abs(a)
    return 2.0 * (np.log(2.0) - a - np.log1p(np.exp(-2.0 * a)))


def _beta_link_logprior(eta, alpha, beta, link):
    """log Beta density of f^{-1}(eta) plus the log Jacobian of the link."""
    if link is Link.LOGIT:
        log_p = -np.logaddexp(0.0, -eta)
        log_q = -np.logaddexp(0.0, eta)
        jac = log_p + log_q
    else:
        e = np.exp(eta)
        log_q = -e
        log_p = _log1mexp(e)
        jac = eta - e
    return (alpha - 1) * log_p + (beta - 1) * log_q + jac - special.betaln(alpha, beta)


@dataclass
class TermLayout:
    key: str
    G: int
    K: int
    log_sd: list
    atanh_cor: int | None
    u_start: int
    gidx: np.ndarray = field(repr=False, default=None)
    z: np.ndarray = field(repr=False, default=None)

    @property
    def u_slice(self):
        return slice(self.u_start, self.u_start + self.G * self.K)

    def u_index(self, k):
        return self.u_start + np.arange(self.G) * self.K + k

    def to_dict(self):
        return {"log_sd": list(map(int, self.log_sd)),
                "atanh_cor": None if self.atanh_cor is None else int(self.atanh_cor),
                "u_start": int(self.u_start), "groups": int(self.G), "components": int(self.K)}


class PooledGLMMPosterior:
    """Unnormalised log posterior of a pooled GLMM with a cached sweep."""

    def __init__(self, design: Design, link: Link, priors: BayesPriors | None = None):
        self.d = design
        self.link = Link.parse(link)
        self.priors = priors or BayesPriors()
        self.X = design.X
        self.s = design.sizes
        self.y = design.results
        self.w = design.weights
        self.p = design.n_fixed
        names = list(design.info.column_names)
        self.has_intercept = INTERCEPT in names
        self.intercept_index = names.index(INTERCEPT) if self.has_intercept else None
        if self.priors.intercept_beta is not None and not self.has_intercept:
            raise DataError("a Beta prior on the baseline prevalence needs an intercept")
        sd = np.full(self.p, self.priors.coef_sd)
        if self.has_intercept:
            sd[self.intercept_index] = self.priors.intercept_sd
        self.beta_sd = sd
        self.sd_scale = self.priors.scales(len(design.blocks))

        self.terms: list[TermLayout] = []
        j = self.p
        var_idx = []
        for b in design.blocks:
            K = b.n_comp
            log_sd = list(range(j, j + K))
            j += K
            cor = None
            if K == 2:
                cor = j
                j += 1
            var_idx.append((log_sd, cor))
        for b, (log_sd, cor) in zip(design.blocks, var_idx):
            self.terms.append(TermLayout(b.term.group_key, b.n_groups, b.n_comp, log_sd, cor, j,
                                         b.index, b.z))
            j += b.n_groups * b.n_comp
        self.dim = j
        self.names = self._names()
        self._C = None

    def _names(self):
        names = list(self.d.info.column_names)
        for b, t in zip(self.d.blocks, self.terms):
            comps = b.component_names
            for c in comps:
                names.append(f"log_sd[{c}|{t.key}]")
            if t.atanh_cor is not None:
                names.append(f"atanh_cor[{t.key}]")
        for b, t in zip(self.d.blocks, self.terms):
            labels = b.level_labels()
            comps = b.component_names
            for lab in labels:
                for c in comps:
                    names.append(f"u[{t.key}={lab}]" if t.K == 1 else f"u[{t.key}={lab}].{c}")
        return names

    # -- pieces of the log posterior ---------------------------------------

    def beta_logprior(self, beta):
        lp = -0.5 * np.sum((beta / self.beta_sd) ** 2, axis=-1)
        if self.priors.intercept_beta is not None:
            i = self.intercept_index
            b0 = beta[..., i]
            lp = lp + 0.5 * (b0 / self.beta_sd[i]) ** 2
            lp = lp + _beta_link_logprior(b0, *self.priors.intercept_beta, self.link)
        return lp

    def sds(self, theta, t: TermLayout):
        return np.exp(theta[:, t.log_sd])

    def var_logprior(self, theta, t: TermLayout, ti):
        """Half-normal priors on the SDs (with log Jacobian) and uniform correlation."""
        ls = theta[:, t.log_sd]
        sd = np.exp(ls)
        lp = np.sum(-0.5 * (sd / self.sd_scale[ti]) ** 2 + ls, axis=1)
        if t.atanh_cor is not None:
            lp = lp + _log_1m_tanh2(theta[:, t.atanh_cor])
        return lp

    def u_logprior_groups(self, theta, t: TermLayout):
        """Log density of every group's effect vector, shape ``(C, G)``."""
        u = theta[:, t.u_slice].reshape(theta.shape[0], t.G, t.K)
        ls = theta[:, t.log_sd]
        if t.K == 1:
            x = u[:, :, 0] * np.exp(-ls[:, 0])[:, None]
            return -0.5 * LOG2PI - ls[:, 0][:, None] - 0.5 * x * x
        rho = np.tanh(theta[:, t.atanh_cor])[:, None]
        x0 = u[:, :, 0] * np.exp(-ls[:, 0])[:, None]
        x1 = u[:, :, 1] * np.exp(-ls[:, 1])[:, None]
        one_m = np.exp(_log_1m_tanh2(theta[:, t.atanh_cor]))[:, None]
        q = (x0 * x0 - 2 * rho * x0 * x1 + x1 * x1) / one_m
        return (-LOG2PI - (ls[:, 0] + ls[:, 1])[:, None]
                - 0.5 * _log_1m_tanh2(theta[:, t.atanh_cor])[:, None] - 0.5 * q)

    def eta(self, theta):
        out = theta[:, :self.p] @ self.X.T
        for t in self.terms:
            u = theta[:, t.u_slice].reshape(theta.shape[0], t.G, t.K)
            out = out + np.einsum("cnk,nk->cn", u[:, t.gidx, :], t.z)
        return out

    def loglik_rows(self, eta):
        return pool_loglik_eta(eta, self.s, self.y, self.link)

    def batch_log_density(self, theta):
        theta = np.atleast_2d(theta)
        ll = self.loglik_rows(self.eta(theta)) @ self.w
        lp = ll + self.beta_logprior(theta[:, :self.p])
        for ti, t in enumerate(self.terms):
            lp = lp + self.var_logprior(theta, t, ti) + self.u_logprior_groups(theta, t).sum(axis=1)
        return np.where(np.isnan(lp), -np.inf, lp)

    def log_density(self, x):
        return float(self.batch_log_density(np.asarray(x, float)[None])[0])

    # -- cache ---------------------------------------------------------------

    def sync(self, theta):
        self.ref = theta.copy()
        self.cur_eta = self.eta(theta)
        self.cur_ll = self.loglik_rows(self.cur_eta)
        C = theta.shape[0]
        if self._C != C:
            self._C = C
            self._flat = [(np.arange(C)[:, None] * t.G + t.gidx[None]).ravel() for t in self.terms]

    def _commit(self, theta, row_mask, cols):
        self.cur_eta = np.where(row_mask, self._pend_eta, self.cur_eta)
        self.cur_ll = np.where(row_mask, self._pend_ll, self.cur_ll)
        self.ref[:, cols] = theta[:, cols]

    # beta block
    def ld_beta(self, theta):
        delta = theta[:, :self.p] - self.ref[:, :self.p]
        if not delta.any():
            eta, ll = self.cur_eta, self.cur_ll
        else:
            eta = self.cur_eta + delta @ self.X.T
            ll = self.loglik_rows(eta)
        self._pend_eta, self._pend_ll = eta, ll
        out = ll @ self.w + self.beta_logprior(theta[:, :self.p])
        return np.where(np.isnan(out), -np.inf, out)

    def commit_beta(self, theta, acc):
        self._commit(theta, acc[:, None], slice(0, self.p))

    # group effects of one term component
    def ld_groups(self, ti, k):
        t = self.terms[ti]
        idx = t.u_index(k)

        def f(theta):
            delta = theta[:, idx] - self.ref[:, idx]
            if not delta.any():
                eta, ll = self.cur_eta, self.cur_ll
            else:
                eta = self.cur_eta + delta[:, t.gidx] * t.z[:, k]
                ll = self.loglik_rows(eta)
            self._pend_eta, self._pend_ll = eta, ll
            C = theta.shape[0]
            sums = np.bincount(self._flat[ti], weights=(ll * self.w).ravel(),
                               minlength=C * t.G).reshape(C, t.G)
            out = sums + self.u_logprior_groups(theta, t)
            return np.where(np.isnan(out), -np.inf, out)

        def commit(theta, acc):
            self._commit(theta, acc[:, t.gidx], idx)

        return f, commit

    # variance parameters given u (no likelihood)
    def ld_var(self, ti):
        t = self.terms[ti]

        def f(theta):
            out = self.var_logprior(theta, t, ti) + self.u_logprior_groups(theta, t).sum(axis=1)
            return np.where(np.isnan(out), -np.inf, out)

        return f

    def var_indices(self, ti):
        t = self.terms[ti]
        return list(t.log_sd) + ([t.atanh_cor] if t.atanh_cor is not None else [])

    # -- sweep -----------------------------------------------------------------

    def make_updates(self, init_cov=None, u_scales=None):
        ups = [_Sync(self)]
        ups.append(RandomWalkBlock(np.arange(self.p), self.ld_beta, init_cov=init_cov,
                                   name="beta", on_step=self.commit_beta,
                                   adapt_cov=not self.terms))
        for ti, (t, b) in enumerate(zip(self.terms, self.d.blocks)):
            for k in range(t.K):
                f, commit = self.ld_groups(ti, k)
                scale = 0.1 if u_scales is None else u_scales[ti][:, k]
                ups.append(GroupedRandomWalk(t.u_index(k), f, init_scale=scale,
                                             name=f"u[{b.component_names[k]}|{t.key}]",
                                             on_step=commit))
            ups.append(_ScaleMove(self, ti))
            ups.append(RandomWalkBlock(self.var_indices(ti), self.ld_var(ti),
                                       init_cov=np.eye(len(self.var_indices(ti))) * 0.05**2,
                                       name=f"var[{t.key}]"))
        ups += self._line_moves()
        return ups

    def _line_moves(self):
        moves = []
        blocks = self.d.blocks
        X = self.X
        for ti, (t, b) in enumerate(zip(self.terms, blocks)):
            # (a) fixed columns constant within the groups of this term
            G = t.G
            first = np.full(G, -1)
            first[t.gidx[::-1]] = np.arange(t.gidx.size)[::-1]
            for j in range(self.p):
                xg = X[first, j]
                if not np.allclose(X[:, j], xg[t.gidx], rtol=0, atol=1e-12):
                    continue
                if not np.any(xg != 0):
                    continue
                v = np.zeros(self.dim)
                v[j] = 1.0
                v[t.u_index(0)] = -xg
                moves.append(_LineMove(self, v[None], [j], [ti], f"shift[{j}|{t.key}]"))
            # slope columns matched by a fixed column
            for k in range(1, t.K):
                for j in range(self.p):
                    if np.array_equal(X[:, j], t.z[:, k]):
                        v = np.zeros(self.dim)
                        v[j] = 1.0
                        v[t.u_index(k)] = -1.0
                        moves.append(_LineMove(self, v[None], [j], [ti], f"shift[{j}|{t.key}].{k}"))
        # (b) nested intercepts: coarse effect against every finer effect inside it
        for ci, (tc, bc) in enumerate(zip(self.terms, blocks)):
            for fi, (tf, bf) in enumerate(zip(self.terms, blocks)):
                if ci == fi or tf.G <= tc.G or not nested_in(bf, bc):
                    continue
                par = parent_map(bf, bc)
                V = np.zeros((tc.G, self.dim))
                V[np.arange(tc.G), tc.u_index(0)] = 1.0
                V[par, tf.u_index(0)] = -1.0
                moves.append(_LineMove(self, V, [], [ci, fi], f"nest[{tc.key}>{tf.key}]",
                                       separable=(ci, fi, par)))
        return moves

    # -- initial values -------------------------------------------------------

    def initial_values(self, beta, sd0=0.3):
        x = np.zeros(self.dim)
        x[:self.p] = beta
        for ti, t in enumerate(self.terms):
            s = min(sd0, 0.5 * self.sd_scale[ti])
            x[t.log_sd] = np.log(s)
            if t.atanh_cor is not None:
                x[t.atanh_cor] = 0.0
        return x

    def u_step_scales(self, beta, x0):
        eta = self.X @ beta
        _, _, _, fisher = pool_loglik_eta(eta, self.s, self.y, self.link, derivatives=True)
        out = []
        for t in self.terms:
            info = np.zeros((t.G, t.K))
            for k in range(t.K):
                info[:, k] = np.bincount(t.gidx, weights=self.w * fisher * t.z[:, k] ** 2,
                                         minlength=t.G)
            sd = np.exp(x0[t.log_sd])
            out.append(2.4 / np.sqrt(info + 1.0 / sd**2))
        return out


class _Sync(Update):
    """Rebuild the cache from the state (at the start and periodically to bound drift)."""

    counts_acceptance = False
    name = "sync"

    def __init__(self, post, every=50):
        self.post = post
        self.every = every

    def step(self, theta, rs, it, warmup):
        if it % self.every == 0:
            self.post.sync(theta)
        return theta


class _ScaleMove(Update):
    """Scale a term's SDs and effects by a common factor ``exp(e)``.

    The standardised effects ``u / sd`` are unchanged, so the prior density
    of ``u`` and the Jacobian of the map cancel and only the likelihood and
    the SD prior enter the acceptance ratio.
    """

    def __init__(self, post: PooledGLMMPosterior, ti):
        self.post = post
        self.ti = ti
        self.name = f"scale[{post.terms[ti].key}]"

    def setup(self, chains, cfg):
        super().setup(chains, cfg)
        self.log_step = np.full(chains, np.log(0.1))
        self.t = 0

    def step(self, theta, rs, it, warmup):
        post, ti = self.post, self.ti
        t = post.terms[ti]
        C = theta.shape[0]
        eps = np.exp(self.log_step) * rs.normal(1)[:, 0]
        u = theta[:, t.u_slice].reshape(C, t.G, t.K)
        contrib = np.einsum("cnk,nk->cn", u[:, t.gidx, :], t.z)
        prop = theta.copy()
        prop[:, t.log_sd] += eps[:, None]
        prop[:, t.u_slice] *= np.exp(eps)[:, None]
        eta = post.cur_eta + np.expm1(eps)[:, None] * contrib
        ll = post.loglik_rows(eta)
        log_ratio = ((ll - post.cur_ll) @ post.w
                     + post.var_logprior(prop, t, ti) - post.var_logprior(theta, t, ti))
        log_ratio = np.where(np.isnan(log_ratio), -np.inf, log_ratio)
        acc = _accept(log_ratio, rs.uniform(1)[:, 0])
        post._pend_eta, post._pend_ll = eta, ll
        theta = np.where(acc[:, None], prop, theta)
        cols = np.r_[t.log_sd, np.arange(t.u_slice.start, t.u_slice.stop)]
        post._commit(theta, acc[:, None], cols)
        if it < warmup:
            self.t += 1
            self.log_step = np.clip(self.log_step + (_accept_prob(log_ratio) - self.target_accept)
                                    / self.t**0.6, -20.0, 3.0)
        self.record(acc, it, warmup)
        return theta


class _LineMove(Update):
    """Metropolis-Hastings move along fixed directions leaving ``eta`` unchanged.

    Only prior terms vary along such a direction. The proposal is the
    Gaussian matching a three-point quadratic fit of the log prior along
    the line, centred at the current point, and the reverse fit enters the
    acceptance ratio. With Gaussian priors the fit is exact and the move
    is a Gibbs step.

    ``V`` holds one direction per row. With several rows the directions
    must touch disjoint prior factors (``separable``), and each row is
    accepted or rejected on its own.
    """

    counts_acceptance = False
    H = 0.1

    def __init__(self, post, V, beta_cols, term_ids, name, separable=None):
        self.post = post
        self.V = V
        self.beta_cols = beta_cols
        self.term_ids = term_ids
        self.name = name
        self.separable = separable
        self.cols = np.flatnonzero(np.any(V != 0, axis=0))
        self.Vc = V[:, self.cols]
        if separable is not None:
            par = separable[2]
            self._agg = np.zeros((par.size, V.shape[0]))
            self._agg[np.arange(par.size), par] = 1.0

    def _pieces(self, theta):
        """Log prior factors touched by the move, shape ``(C, M)``."""
        post = self.post
        if self.separable is None:
            out = 0.0
            if self.beta_cols:
                out = out + post.beta_logprior(theta[:, :post.p])
            for ti in self.term_ids:
                out = out + post.u_logprior_groups(theta, post.terms[ti]).sum(axis=1)
            return np.asarray(out)[:, None]
        ci, fi, _ = self.separable
        coarse = post.u_logprior_groups(theta, post.terms[ci])
        fine = post.u_logprior_groups(theta, post.terms[fi])
        return coarse + fine @ self._agg

    def _moved(self, theta, t):
        out = theta.copy()
        out[:, self.cols] += t @ self.Vc if t.ndim == 2 else t[:, None] * self.Vc
        return out

    def _fit(self, theta, f0):
        h = self.H
        M = self.V.shape[0]
        C = theta.shape[0]
        both = self._pieces(np.concatenate([self._moved(theta, np.full((C, M), h)),
                                            self._moved(theta, np.full((C, M), -h))]))
        fp, fm = both[:C], both[C:]
        curv = -(fp - 2 * f0 + fm) / h**2
        slope = (fp - fm) / (2 * h)
        ok = np.isfinite(curv) & (curv > 1e-12) & np.isfinite(slope)
        mean = np.where(ok, slope / np.where(ok, curv, 1.0), 0.0)
        sd = np.where(ok, 1.0 / np.sqrt(np.where(ok, curv, 1.0)), 10 * h)
        return mean, sd

    @staticmethod
    def _logq(x, mean, sd):
        return -np.log(sd) - 0.5 * ((x - mean) / sd) ** 2

    def step(self, theta, rs, it, warmup):
        M = self.V.shape[0]
        f0 = self._pieces(theta)
        mean, sd = self._fit(theta, f0)
        t = mean + sd * rs.normal(M)
        prop = self._moved(theta, t)
        f1 = self._pieces(prop)
        mean1, sd1 = self._fit(prop, f1)
        log_ratio = f1 - f0 + self._logq(-t, mean1, sd1) - self._logq(t, mean, sd)
        acc = _accept(log_ratio, rs.uniform(M))
        t = np.where(acc, t, 0.0)
        theta = self._moved(theta, t)
        self.post.ref[:, self.cols] = theta[:, self.cols]
        self.record(acc, it, warmup)
        return theta


def fit_bayes(formula, data, priors: BayesPriors | None = None, mcmc_cfg: McmcConfig | None = None,
              link=None, level=0.95, min_groups=2):
    """Bayesian pooled regression with optional random effects."""
    from .model import FittedModel, RandomEffectSummary, observed_frame

    f = parse_formula(formula, link or "logit") if isinstance(formula, str) else formula
    if link is not None and not isinstance(formula, str):
        f = type(f)(f.response, f.fixed_terms, f.random_terms, f.intercept, Link.parse(link), f.text)
    cfg = mcmc_cfg or McmcConfig()
    full = build_design(f, data, min_groups=min_groups)
    d = full.compressed()
    post = PooledGLMMPosterior(d, f.link, priors)
    draws = run_posterior(post, cfg)
    flat = draws.flat()

    p = post.p
    beta_mean = flat[:, :p].mean(axis=0)
    beta_cov = np.atleast_2d(np.cov(flat[:, :p], rowvar=False))
    effects = []
    for t, b in zip(post.terms, d.blocks):
        sd_draws = np.exp(flat[:, t.log_sd])
        corr = None if t.atanh_cor is None else float(np.tanh(flat[:, t.atanh_cor]).mean())
        modes = flat[:, t.u_slice].mean(axis=0).reshape(t.G, t.K)
        effects.append(RandomEffectSummary(term=b.term, levels=b.levels, sd=sd_draws.mean(axis=0),
                                           corr=corr, modes=modes, layout=t.to_dict()))
    return FittedModel(
        formula=f,
        framework="bayesian",
        design_info=full.info,
        coefficients=beta_mean,
        covariance=beta_cov,
        random_effects=effects,
        fit_metadata={
            "num_pools": len(data),
            "link": f.link.value,
            "priors": post.priors.to_dict(),
            "mcmc": {"chains": cfg.chains, "warmup_iters": cfg.warmup_iters,
                     "sampling_iters": cfg.sampling_iters, "seed": cfg.seed},
            "diagnostics": draws.diagnostics(),
            "warnings": list(draws.warnings),
        },
        level=level,
        frame=observed_frame(f, data),
        draws=draws,
        seed=cfg.seed,
    )


def run_posterior(post: PooledGLMMPosterior, cfg: McmcConfig):
    d = post.d
    try:
        beta0, cov0, _, _ = newton_fit(d.X, d.sizes, d.results, d.weights, post.link)
    except Exception:
        # separated or degenerate data: start from the prior mode region
        beta0, cov0 = np.zeros(post.p), np.eye(post.p) * 0.1
    x0 = post.initial_values(beta0)
    u_scales = post.u_step_scales(beta0, x0)
    cov0 = 0.5 * (cov0 + cov0.T) + 1e-10 * np.eye(post.p)
    target = TargetDensity(
        post.dim, post.log_density, post.names, batch_log_density=post.batch_log_density,
        make_updates=lambda: post.make_updates(init_cov=cov0, u_scales=u_scales),
    )
    if not np.isfinite(post.log_density(x0)):
        x0[:post.p] = 0.0
    return sample(target, x0, cfg)


def term_draws(model, t_index):
    """Per-draw effects ``(S, G, K)`` and covariance Cholesky factors ``(S, K, K)``."""
    re = model.random_effects[t_index]
    lay = re.layout
    flat = model.draws.flat()
    G, K = lay["groups"], lay["components"]
    u = flat[:, lay["u_start"]:lay["u_start"] + G * K].reshape(-1, G, K)
    sd = np.exp(flat[:, lay["log_sd"]])
    L = np.zeros((flat.shape[0], K, K))
    L[:, 0, 0] = sd[:, 0]
    if K == 2:
        rho = np.tanh(flat[:, lay["atanh_cor"]])
        L[:, 1, 0] = rho * sd[:, 1]
        L[:, 1, 1] = np.sqrt(1 - rho**2) * sd[:, 1]
    return u, L
