"""Mixed-effect pooled regression by Laplace-approximate marginal likelihood.

Random effects are written ``u = Lambda(theta) b`` with ``b ~ N(0, I)``,
where ``Lambda`` is block diagonal with one lower-triangular factor per
term repeated over its groups. For fixed ``(beta, theta)`` the mode of
``b`` solves a penalised problem by Newton's method, and

    log L(beta, theta) ~= l(eta_hat) - |b_hat|^2 / 2 - log det(A'WA + I) / 2

with ``A = Z Lambda`` and ``W`` the negative second derivative of the pool
log-likelihood in ``eta``. The outer problem is solved by L-BFGS-B over
``beta`` and the entries of each factor, diagonal entries bounded below
by zero so a variance can reach its boundary.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy import optimize, sparse
from scipy.sparse import linalg as splinalg

from ..errors import DataError, NumericalError
from ..model_core import Link, pool_loglik_eta
from .design import Design, build_design
from .formula import parse_formula
from .glm import newton_fit

BOUNDARY = 1e-6


class LaplaceProblem:
    def __init__(self, design: Design, link: Link):
        self.d = design
        self.link = link
        self.p = design.n_fixed
        rows, cols, vals = [], [], []
        self.offsets = []
        off = 0
        n = design.X.shape[0]
        for b in design.blocks:
            self.offsets.append(off)
            K = b.n_comp
            for k in range(K):
                rows.append(np.arange(n))
                cols.append(off + b.index * K + k)
                vals.append(b.z[:, k])
            off += b.n_groups * b.n_comp
        self.q = off
        self.Z = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, off)
        )
        self.theta_sizes = [1 if b.n_comp == 1 else 3 for b in design.blocks]
        self.b = np.zeros(self.q)
        self.evals = 0

    # -- parameter maps ----------------------------------------------------

    def factors(self, theta):
        out, j = [], 0
        for blk, m in zip(self.d.blocks, self.theta_sizes):
            t = theta[j:j + m]
            if blk.n_comp == 1:
                out.append(np.array([[t[0]]]))
            else:
                out.append(np.array([[t[0], 0.0], [t[1], t[2]]]))
            j += m
        return out

    def theta_bounds(self):
        bounds = []
        for blk in self.d.blocks:
            bounds += [(0.0, None)] if blk.n_comp == 1 else [(0.0, None), (None, None), (0.0, None)]
        return bounds

    def theta_start(self, sd=0.5):
        out = []
        for blk in self.d.blocks:
            out += [sd] if blk.n_comp == 1 else [sd, 0.0, sd]
        return np.asarray(out, dtype=float)

    def lam(self, theta):
        mats = []
        for blk, L in zip(self.d.blocks, self.factors(theta)):
            mats.append(sparse.kron(sparse.eye(blk.n_groups), sparse.csr_matrix(L)))
        return sparse.block_diag(mats, format="csr")

    # -- inner problem -----------------------------------------------------

    def _pieces(self, eta):
        d = self.d
        ll, d1, d2, fisher = pool_loglik_eta(eta, d.sizes, d.results, self.link, derivatives=True)
        return float(d.weights @ ll), d.weights * d1, d.weights * d2, d.weights * fisher

    def inner(self, beta, theta, b0=None, tol=1e-10, max_iter=100):
        """Mode of ``b`` and the pieces of the Laplace approximation."""
        A = (self.Z @ self.lam(theta)).tocsc()
        At = A.T.tocsr()
        fixed = self.d.X @ beta
        b = self.b.copy() if b0 is None else b0.copy()
        eye = sparse.eye(self.q, format="csc")

        def objective(bv):
            ll, d1, d2, fi = self._pieces(fixed + A @ bv)
            return ll - 0.5 * bv @ bv, ll, d1, d2, fi

        h, ll, d1, d2, fi = objective(b)
        lu = None
        for _ in range(max_iter):
            g = At @ d1 - b
            w = -d2
            if np.any(w < 0):
                w = fi
            H = (At @ sparse.diags(w) @ A + eye).tocsc()
            lu = splinalg.splu(H, permc_spec="MMD_AT_PLUS_A")
            if np.max(np.abs(g)) < tol:
                break
            step = lu.solve(g)
            t = 1.0
            for _ in range(50):
                cand = b + t * step
                ch, cll, cd1, cd2, cfi = objective(cand)
                if np.isfinite(ch) and ch >= h - 1e-13 * abs(h):
                    break
                t *= 0.5
            else:
                break
            done = np.max(np.abs(t * step)) < 1e-12
            b, h, ll, d1, d2, fi = cand, ch, cll, cd1, cd2, cfi
            if done:
                w = -d2 if np.all(d2 <= 0) else fi
                H = (At @ sparse.diags(w) @ A + eye).tocsc()
                lu = splinalg.splu(H, permc_spec="MMD_AT_PLUS_A")
                break
        logdet = float(np.sum(np.log(np.abs(lu.U.diagonal()))))
        return b, ll, logdet, lu, A

    def log_marginal(self, x):
        beta, theta = x[:self.p], x[self.p:]
        b, ll, logdet, _, _ = self.inner(beta, theta)
        self.evals += 1
        val = ll - 0.5 * b @ b - 0.5 * logdet
        if np.isfinite(val):
            self.b = b
        return val


def _num_grad(f, x, bounds=None, rel=1e-5):
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel * max(1.0, abs(x[j]))
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _num_hessian(f, x, idx, rel=1e-4):
    m = len(idx)
    H = np.empty((m, m))
    hs = [rel * max(1.0, abs(x[j])) for j in idx]
    f0 = f(x)
    for a in range(m):
        for c in range(a, m):
            ea = np.zeros_like(x)
            ec = np.zeros_like(x)
            ea[idx[a]] = hs[a]
            ec[idx[c]] = hs[c]
            if a == c:
                H[a, a] = (f(x + ea) - 2 * f0 + f(x - ea)) / hs[a] ** 2
            else:
                H[a, c] = H[c, a] = (
                    f(x + ea + ec) - f(x + ea - ec) - f(x - ea + ec) + f(x - ea - ec)
                ) / (4 * hs[a] * hs[c])
    return H


def fit_glmm_laplace(formula, data, link=None, level=0.95, max_outer=200):
    """Frequentist mixed-effect pooled regression."""
    from .model import FittedModel, RandomEffectSummary, observed_frame

    f = parse_formula(formula, link or "logit") if isinstance(formula, str) else formula
    if link is not None and not isinstance(formula, str):
        f = type(f)(f.response, f.fixed_terms, f.random_terms, f.intercept, Link.parse(link), f.text)
    if not f.random_terms:
        raise DataError("fit_glmm_laplace needs at least one random-effect term")
    full = build_design(f, data)
    d = full.compressed()
    prob = LaplaceProblem(d, f.link)

    beta0, _, glm_ll, _ = newton_fit(d.X, d.sizes, d.results, d.weights, f.link)
    x0 = np.concatenate([beta0, prob.theta_start()])
    bounds = [(None, None)] * prob.p + prob.theta_bounds()

    def neg(x):
        return -prob.log_marginal(x)

    res = optimize.minimize(
        neg, x0, jac=lambda x: _num_grad(neg, x), method="L-BFGS-B", bounds=bounds,
        options={"maxiter": max_outer, "ftol": 1e-13, "gtol": 1e-7, "maxls": 40},
    )
    if not res.success and res.nit >= max_outer:
        raise NumericalError(f"Laplace fit did not converge in {max_outer} outer iterations")
    x = res.x
    beta, theta = x[:prob.p], x[prob.p:]
    b, ll, logdet, lu, A = prob.inner(beta, theta)
    log_marg = ll - 0.5 * b @ b - 0.5 * logdet

    factors = prob.factors(theta)
    msgs = []
    sds = []
    for blk, L in zip(d.blocks, factors):
        sd = np.sqrt(np.sum(L**2, axis=1))
        sds.append(sd)
        for name, s in zip(blk.component_names, sd):
            if s < BOUNDARY:
                msgs.append(f"random-effect SD for {name}|{blk.term.group_key} is at the "
                            f"boundary ({s:.2g}); the variance has collapsed to zero")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)

    # Wald covariance for beta from the numerical Hessian of the log marginal
    on_boundary = any(np.any(s < BOUNDARY) for s in sds)
    cov = None
    if not on_boundary:
        H = _num_hessian(neg, x, list(range(x.size)))
        try:
            full_cov = np.linalg.inv(0.5 * (H + H.T))
            cov = full_cov[:prob.p, :prob.p]
            if np.any(np.linalg.eigvalsh(0.5 * (cov + cov.T)) <= 0):
                cov = None
        except np.linalg.LinAlgError:
            cov = None
    if cov is None:
        H = _num_hessian(neg, x, list(range(prob.p)))
        try:
            cov = np.linalg.inv(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            raise NumericalError("information matrix for the fixed effects is singular") from None
    cov = 0.5 * (cov + cov.T)

    lam = prob.lam(theta).toarray()
    u = lam @ b
    Hinv = lu.solve(np.eye(prob.q))
    ucov = lam @ Hinv @ lam.T
    effects = []
    for t, (blk, L, sd) in enumerate(zip(d.blocks, factors, sds)):
        off, K, G = prob.offsets[t], blk.n_comp, blk.n_groups
        sl = slice(off, off + G * K)
        modes = u[sl].reshape(G, K)
        cc = ucov[sl, sl]
        cond = np.stack([cc[g * K:(g + 1) * K, g * K:(g + 1) * K] for g in range(G)])
        S = L @ L.T
        corr = None
        if K == 2:
            corr = float(S[0, 1] / (sd[0] * sd[1])) if sd[0] > 0 and sd[1] > 0 else 0.0
        effects.append(RandomEffectSummary(
            term=blk.term, levels=blk.levels, sd=sd, corr=corr, modes=modes, cond_cov=cond,
        ))
    return FittedModel(
        formula=f,
        framework="frequentist",
        design_info=full.info,
        coefficients=beta,
        covariance=cov,
        random_effects=effects,
        fit_metadata={
            "loglik": float(log_marg),
            "fixed_effect_loglik": float(glm_ll),
            "iterations": int(res.nit),
            "function_evaluations": prob.evals,
            "theta": [float(v) for v in theta],
            "num_pools": len(data),
            "link": f.link.value,
            "warnings": msgs,
        },
        level=level,
        frame=observed_frame(f, data),
    )
