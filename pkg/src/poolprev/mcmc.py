"""Adaptive random-walk Metropolis with convergence diagnostics.

All chains advance together: the state is a ``(chains, dim)`` array and
each update proposes for every chain at once. Chains stay statistically
independent because each one draws from its own stream spawned from the
user seed, and adaptation state is kept per chain. Results therefore do
not depend on thread scheduling (there is none) and are bit-identical for
a given ``(seed, config, target)``.

A sweep is a list of :class:`Update` objects. By default this is a single
:class:`RandomWalkBlock` over every coordinate, using the target's full
log density. Structured targets (hierarchical models) provide their own
sweep built from :class:`RandomWalkBlock`, :class:`GroupedRandomWalk` and
model-specific moves, i.e. adaptive Metropolis-within-Gibbs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .errors import DomainError, NumericalError


@dataclass
class McmcConfig:
    chains: int = 4
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    seed: int = 0
    target_accept: float = 0.4
    initial_jitter_scale: float = 0.1

    def __post_init__(self):
        if self.chains < 2:
            raise DomainError("at least 2 chains are required for diagnostics")
        if self.warmup_iters < 100 or self.sampling_iters < 100:
            raise DomainError("warmup and sampling iterations must each be >= 100")
        if not 0 < self.target_accept < 1:
            raise DomainError("target_accept must lie in (0, 1)")


@dataclass
class TargetDensity:
    """Unnormalised log density.

    ``log_density`` maps a vector of length ``dim`` to a float (``-inf``
    allowed). ``batch_log_density``, if given, maps a ``(chains, dim)``
    array to a ``(chains,)`` array and is used by the default sweep.
    ``make_updates`` builds a fresh sweep (new adaptation state) per call.
    """

    dim: int
    log_density: Callable[[np.ndarray], float]
    parameter_names: Sequence[str] | None = None
    batch_log_density: Callable[[np.ndarray], np.ndarray] | None = None
    make_updates: Callable[[], list] | None = None

    def __post_init__(self):
        if self.parameter_names is None:
            self.parameter_names = [f"x{i}" for i in range(self.dim)]
        if len(self.parameter_names) != self.dim:
            raise DomainError("parameter_names must have length dim")

    def batch(self, theta):
        if self.batch_log_density is not None:
            return np.asarray(self.batch_log_density(theta), dtype=float)
        return np.array([self.log_density(t) for t in theta], dtype=float)


class ChainStreams:
    """Per-chain buffered random numbers.

    Every chain consumes the same number of variates per iteration, so one
    read position serves all buffers.
    """

    def __init__(self, seed, chains, buffer=8192):
        seqs = np.random.SeedSequence(seed).spawn(chains)
        self.gens = [np.random.default_rng(s) for s in seqs]
        self.chains = chains
        self._size = buffer
        self._normal = self._uniform = None
        self._pn = self._pu = buffer

    def normal(self, k):
        if self._pn + k > (0 if self._normal is None else self._normal.shape[1]):
            n = max(self._size, k)
            self._normal = np.stack([g.standard_normal(n) for g in self.gens])
            self._pn = 0
        out = self._normal[:, self._pn:self._pn + k]
        self._pn += k
        return out

    def uniform(self, k):
        if self._pu + k > (0 if self._uniform is None else self._uniform.shape[1]):
            n = max(self._size, k)
            self._uniform = np.stack([g.random(n) for g in self.gens])
            self._pu = 0
        out = self._uniform[:, self._pu:self._pu + k]
        self._pu += k
        return out


def _accept(log_ratio, u):
    with np.errstate(invalid="ignore"):
        acc = np.log(u) < log_ratio
    return acc & ~np.isnan(log_ratio)


def _accept_prob(log_ratio):
    with np.errstate(over="ignore", invalid="ignore"):
        a = np.exp(np.minimum(log_ratio, 0.0))
    return np.where(np.isnan(a), 0.0, a)


class Update:
    """One component of a sweep. Subclasses implement :meth:`step`."""

    name = "update"
    counts_acceptance = True

    def setup(self, chains, cfg: McmcConfig):
        self.chains = chains
        self.target_accept = cfg.target_accept
        self.n_accept = np.zeros(chains)
        self.n_prop = 0

    def step(self, theta, rs: ChainStreams, it: int, warmup: int):
        raise NotImplementedError

    def record(self, accepted, it, warmup):
        if it >= warmup:
            acc = np.asarray(accepted, dtype=float)
            self.n_accept += acc if acc.ndim == 1 else acc.mean(axis=1)
            self.n_prop += 1

    @property
    def acceptance_rate(self):
        return self.n_accept / max(self.n_prop, 1)


class RandomWalkBlock(Update):
    """Joint Gaussian random walk on a subset of coordinates.

    During warmup the proposal scale follows a Robbins-Monro recursion
    toward the target acceptance rate and (unless ``adapt_cov`` is false)
    the proposal covariance is re-estimated from the chain's own history;
    both are frozen afterwards.
    """

    def __init__(self, indices, log_density, init_cov=None, name="block", on_step=None,
                 adapt_cov=True):
        self.adapt_cov = adapt_cov
        self.indices = np.atleast_1d(np.asarray(indices, dtype=int))
        self.log_density = log_density
        k = self.indices.size
        self.init_cov = np.eye(k) * 0.1**2 if init_cov is None else np.atleast_2d(np.asarray(init_cov, float))
        self.name = name
        self.on_step = on_step

    def setup(self, chains, cfg):
        super().setup(chains, cfg)
        k = self.indices.size
        self.log_scale = np.full(chains, np.log(2.38 / np.sqrt(k)))
        self.chol = np.repeat(np.linalg.cholesky(self.init_cov + 1e-14 * np.eye(k))[None], chains, 0)
        self._reset_moments()
        self.t = 0
        self._last = None

    def _reset_moments(self):
        k = self.indices.size
        self.n = 0
        self.mean = np.zeros((self.chains, k))
        self.m2 = np.zeros((self.chains, k, k))

    @property
    def proposal_cov(self):
        s = np.exp(self.log_scale)[:, None, None]
        return s**2 * np.einsum("cij,ckj->cik", self.chol, self.chol)

    def step(self, theta, rs, it, warmup):
        k = self.indices.size
        if self._last is not None and np.array_equal(self._last[0], theta):
            cur = self._last[1]
        else:
            cur = self.log_density(theta)
        z = rs.normal(k)
        delta = np.exp(self.log_scale)[:, None] * np.einsum("cij,cj->ci", self.chol, z)
        prop = theta.copy()
        prop[:, self.indices] += delta
        new = self.log_density(prop)
        log_ratio = new - cur
        acc = _accept(log_ratio, rs.uniform(1)[:, 0])
        theta = np.where(acc[:, None], prop, theta)
        self._last = (theta, np.where(acc, new, cur))
        if self.on_step is not None:
            self.on_step(theta, acc)
        if it < warmup:
            self._adapt(theta, _accept_prob(log_ratio), it, warmup)
        self.record(acc, it, warmup)
        return theta

    def _adapt(self, theta, alpha, it, warmup):
        self.t += 1
        self.log_scale = np.clip(
            self.log_scale + (alpha - self.target_accept) / self.t**0.6, -30.0, 10.0
        )
        start, restart = warmup // 4, warmup // 2
        if it < start or not self.adapt_cov:
            return
        if it == restart:
            self._reset_moments()
        x = theta[:, self.indices]
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += np.einsum("ci,cj->cij", d, x - self.mean)
        k = self.indices.size
        if self.n >= max(20, 2 * k) and self.n % 25 == 0:
            n0 = k + 10.0
            cov = (self.m2 + n0 * self.init_cov) / (self.n - 1 + n0)
            cov = 0.5 * (cov + np.swapaxes(cov, 1, 2)) + 1e-14 * np.eye(k)
            for c in range(self.chains):
                try:
                    self.chol[c] = np.linalg.cholesky(cov[c])
                except np.linalg.LinAlgError:
                    pass


class GroupedRandomWalk(Update):
    """Independent scalar random walks on conditionally independent coordinates.

    ``group_log_density(theta)`` returns a ``(chains, G)`` array whose column
    ``g`` is the log density of coordinate ``indices[g]`` given everything
    else, up to terms that do not involve it. Scales adapt per coordinate.
    """

    def __init__(self, indices, group_log_density, init_scale=0.1, name="groups", on_step=None):
        self.indices = np.asarray(indices, dtype=int)
        self.group_log_density = group_log_density
        self.init_scale = init_scale
        self.name = name
        self.on_step = on_step

    def setup(self, chains, cfg):
        super().setup(chains, cfg)
        scale = np.broadcast_to(np.asarray(self.init_scale, float), self.indices.shape)
        self.log_scale = np.repeat(np.log(scale)[None], chains, 0).copy()
        self.t = 0

    def step(self, theta, rs, it, warmup):
        g = self.indices.size
        cur = self.group_log_density(theta)
        prop = theta.copy()
        prop[:, self.indices] += np.exp(self.log_scale) * rs.normal(g)
        new = self.group_log_density(prop)
        log_ratio = new - cur
        acc = _accept(log_ratio, rs.uniform(g))
        theta = theta.copy()
        theta[:, self.indices] = np.where(acc, prop[:, self.indices], theta[:, self.indices])
        if self.on_step is not None:
            self.on_step(theta, acc)
        if it < warmup:
            self.t += 1
            self.log_scale = np.clip(
                self.log_scale + (_accept_prob(log_ratio) - self.target_accept) / self.t**0.6,
                -30.0, 10.0,
            )
        self.record(acc, it, warmup)
        return theta


@dataclass
class PosteriorDraws:
    draws: np.ndarray  # chains x sampling_iters x dim
    parameter_names: list
    rhat: np.ndarray
    ess: np.ndarray
    rhat_degenerate: np.ndarray
    acceptance_rate: np.ndarray
    warnings: list = field(default_factory=list)
    proposal_covariances: dict = field(default_factory=dict)

    def index(self, name):
        return list(self.parameter_names).index(name)

    def param(self, name):
        return self.draws[:, :, self.index(name)]

    def flat(self, name=None):
        if name is None:
            return self.draws.reshape(-1, self.draws.shape[-1])
        return self.param(name).reshape(-1)

    @property
    def max_rhat(self):
        return float(np.nanmax(self.rhat)) if self.rhat.size else 1.0

    @property
    def min_ess(self):
        return float(np.nanmin(self.ess)) if np.any(np.isfinite(self.ess)) else float("nan")

    def diagnostics(self):
        return {"max_rhat": self.max_rhat, "min_ess": self.min_ess,
                "acceptance_rate": [float(a) for a in self.acceptance_rate],
                "warnings": list(self.warnings)}


def sample(target: TargetDensity, init, cfg: McmcConfig | None = None) -> PosteriorDraws:
    """Run adaptive Metropolis chains and return post-warmup draws.

    Raises
    ------
    NumericalError
        If ``target.log_density(init)`` is not finite.
    """
    cfg = cfg or McmcConfig()
    init = np.asarray(init, dtype=float).reshape(target.dim)
    if not np.isfinite(target.log_density(init)):
        raise NumericalError("log density is not finite at the initial point")
    C = cfg.chains
    rs = ChainStreams(cfg.seed, C)
    theta = _jittered_start(target, init, rs, cfg)

    if target.make_updates is not None:
        updates = target.make_updates()
    else:
        updates = [RandomWalkBlock(np.arange(target.dim), target.batch, name="all")]
    for up in updates:
        up.setup(C, cfg)

    W, S = cfg.warmup_iters, cfg.sampling_iters
    out = np.empty((C, S, target.dim))
    for it in range(W + S):
        for up in updates:
            theta = up.step(theta, rs, it, W)
        if it >= W:
            out[:, it - W] = theta
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite draws")

    rates = [up.acceptance_rate for up in updates if up.counts_acceptance]
    acceptance = np.mean(rates, axis=0) if rates else np.ones(C)
    msgs = []
    for up in updates:
        if up.counts_acceptance and np.any(up.acceptance_rate < 0.01):
            msgs.append(f"stuck chain in update {up.name!r}: acceptance "
                        f"{np.round(up.acceptance_rate, 4).tolist()}")
    for m in msgs:
        warnings.warn(m, RuntimeWarning, stacklevel=2)

    rhat = np.empty(target.dim)
    degenerate = np.zeros(target.dim, dtype=bool)
    ess = np.empty(target.dim)
    for j in range(target.dim):
        rhat[j], degenerate[j] = split_rhat(out[:, :, j], return_flag=True)
        ess[j] = bulk_ess(out[:, :, j])
    props = {up.name: up.proposal_cov for up in updates if isinstance(up, RandomWalkBlock)}
    return PosteriorDraws(out, list(target.parameter_names), rhat, ess, degenerate,
                          acceptance, msgs, props)


def _jittered_start(target, init, rs, cfg):
    C = cfg.chains
    theta = np.repeat(init[None], C, 0)
    scale = cfg.initial_jitter_scale
    z = rs.normal(target.dim)
    for _ in range(30):
        cand = init[None] + scale * z
        ok = np.isfinite(target.batch(cand))
        if ok.all():
            return cand
        scale *= 0.5
    return theta


# -- diagnostics ---------------------------------------------------------


def _check_draws(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] // 2 < 4:
        raise DomainError("need >= 2 chains and >= 4 draws per split half")
    return x


def _split(x):
    half = x.shape[1] // 2
    return np.concatenate([x[:, :half], x[:, x.shape[1] - half:]], axis=0)


def split_rhat(x, return_flag=False):
    """Split-chain potential scale reduction for draws shaped ``(chains, draws)``.

    Zero within- and between-chain variance is reported as 1.0 with the
    degenerate flag set. Values are floored at 1.
    """
    x = _split(_check_draws(x))
    n = x.shape[1]
    w = x.var(axis=1, ddof=1).mean()
    b_over_n = x.mean(axis=1).var(ddof=1)
    if w <= 0 or not np.isfinite(w):
        value, flag = (1.0, True) if b_over_n <= 0 else (float("inf"), True)
    else:
        var_plus = (n - 1) / n * w + b_over_n
        value, flag = max(1.0, float(np.sqrt(var_plus / w))), False
    return (value, flag) if return_flag else value


def _autocov(x):
    n = x.shape[-1]
    m = 1 << int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=m, axis=-1)[..., :n] / n


def _ess(x):
    m, n = x.shape
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1)
    mean_var = chain_var.mean()
    var_plus = mean_var * (n - 1) / n + x.mean(axis=1).var(ddof=1)
    if var_plus <= 0 or not np.isfinite(var_plus):
        return float("nan")
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    total = 0.0
    prev = np.inf
    for t in range(0, n - 1, 2):
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)  # initial monotone sequence
        total += pair
        prev = pair
    tau = max(-1.0 + 2.0 * total, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def _rank_normalize(x):
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def bulk_ess(x):
    """Rank-normalised bulk effective sample size (split chains)."""
    x = _check_draws(x)
    if np.ptp(x) == 0:
        return float("nan")
    return _ess(_split(_rank_normalize(x)))


def ess_mean(x):
    """Effective sample size for the posterior mean (no rank normalisation)."""
    x = _check_draws(x)
    if np.ptp(x) == 0:
        return float("nan")
    return _ess(_split(x))


def mcse_mean(x):
    x = np.asarray(x, dtype=float)
    return float(x.std(ddof=1) / np.sqrt(ess_mean(x)))
