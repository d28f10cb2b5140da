"""Synthetic pooled-surveillance surveys with known prevalence.

Regions contain villages, villages contain sites, and every site is
sampled once per year. The individual-level prevalence at a site is

    logit p = logit(base[region]) + u_village + u_site + (log OR + b_village) * year

with centred normal village intercepts ``u_village``, site intercepts
``u_site`` and village-specific year slopes ``b_village``. Each site-year
catch is negative binomial and is split into pools of at most
``pool_max`` individuals.
"""

from __future__ import annotations

import string
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import special

from .dataset import PoolDataset
from .errors import DomainError
from .model_core import pool_positive_prob


@dataclass(frozen=True)
class SimConfig:
    region_prevalences: tuple = (0.005, 0.02, 0.04)
    villages_per_region: int = 10
    sites_per_village: int = 10
    years: tuple = (0, 1, 2)
    year_odds_ratio: float = 0.8
    catch_mean: float = 200.0
    catch_dispersion: float = 5.0  # negative-binomial size
    pool_max: int = 25
    sd_village_intercept: float = 0.5
    sd_site_intercept: float = 0.3
    sd_village_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "region_prevalences", tuple(float(p) for p in self.region_prevalences))
        object.__setattr__(self, "years", tuple(self.years))
        if not self.region_prevalences or len(self.region_prevalences) > 26:
            raise DomainError("between 1 and 26 regions are supported")
        if any(not 0 < p < 1 for p in self.region_prevalences):
            raise DomainError("region prevalences must lie in (0, 1)")
        if self.villages_per_region < 1 or self.sites_per_village < 1 or not self.years:
            raise DomainError("need at least one village, site and year")
        if self.pool_max < 1:
            raise DomainError("pool_max must be >= 1")
        if self.catch_mean <= 0 or self.catch_dispersion <= 0:
            raise DomainError("catch mean and dispersion must be positive")
        if self.year_odds_ratio <= 0:
            raise DomainError("year odds ratio must be positive")
        if min(self.sd_village_intercept, self.sd_site_intercept, self.sd_village_slope) < 0:
            raise DomainError("standard deviations must be non-negative")

    @property
    def regions(self):
        return list(string.ascii_uppercase[: len(self.region_prevalences)])

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


@dataclass
class GroundTruth:
    site_year: pd.DataFrame  # Region, Village, Site, Year, Catch, Prevalence
    region_year: pd.DataFrame  # Region, Year, Prevalence
    village_year: pd.DataFrame  # Region, Village, Year, Prevalence
    effects: pd.DataFrame = field(default_factory=pd.DataFrame)  # realised random effects

    def region_year_lookup(self) -> dict:
        return {(r, y): p for r, y, p in self.region_year[["Region", "Year", "Prevalence"]].itertuples(index=False)}


def partition_catch(catch: int, pool_max: int) -> list[int]:
    """Split ``catch`` individuals into full pools plus one remainder pool."""
    catch, pool_max = int(catch), int(pool_max)
    if catch < 0:
        raise DomainError("catch must be non-negative")
    if pool_max < 1:
        raise DomainError("pool_max must be >= 1")
    full, rest = divmod(catch, pool_max)
    return [pool_max] * full + ([rest] if rest else [])


def negative_binomial(rng, mean, size, n):
    """Counts with mean ``mean`` and variance ``mean + mean**2 / size``."""
    return rng.negative_binomial(size, size / (size + mean), n)


def simulate(cfg: SimConfig | None = None) -> tuple[PoolDataset, GroundTruth]:
    cfg = cfg or SimConfig()
    s_eff, s_catch, s_res = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_eff = np.random.default_rng(s_eff)
    R, V, S = len(cfg.region_prevalences), cfg.villages_per_region, cfg.sites_per_village
    years = np.asarray(cfg.years, dtype=float)

    u_v = rng_eff.standard_normal((R, V)) * cfg.sd_village_intercept
    b_v = rng_eff.standard_normal((R, V)) * cfg.sd_village_slope
    u_s = rng_eff.standard_normal((R, V, S)) * cfg.sd_site_intercept

    base = special.logit(np.asarray(cfg.region_prevalences))
    slope = np.log(cfg.year_odds_ratio) + b_v
    eta = (base[:, None, None, None] + u_v[:, :, None, None] + u_s[..., None]
           + slope[:, :, None, None] * years[None, None, None, :])
    prev = special.expit(eta)  # R x V x S x Y

    catches = negative_binomial(np.random.default_rng(s_catch), cfg.catch_mean,
                                cfg.catch_dispersion, prev.size).reshape(prev.shape)

    regions = cfg.regions
    vil = [[f"{regions[r]}-{v + 1}" for v in range(V)] for r in range(R)]
    site = [[[f"{vil[r][v]}-{s + 1}" for s in range(S)] for v in range(V)] for r in range(R)]

    idx = np.array(np.unravel_index(np.arange(prev.size), prev.shape)).T  # cell coordinates
    flat_catch = catches.reshape(-1)
    full, rest = np.divmod(flat_catch, cfg.pool_max)
    n_pools = full + (rest > 0)
    cell = np.repeat(np.arange(prev.size), n_pools)
    # position of each pool within its cell; the last one carries the remainder
    start = np.cumsum(n_pools) - n_pools
    pos = np.arange(cell.size) - start[cell]
    sizes = np.where(pos < full[cell], cfg.pool_max, rest[cell])

    p_pool = prev.reshape(-1)[cell]
    u = np.random.default_rng(s_res).random(cell.size)
    results = (u < pool_positive_prob(p_pool, sizes)).astype(int)

    r_i, v_i, s_i, y_i = idx[cell].T
    region_col = np.asarray(regions, dtype=object)[r_i]
    village_col = np.asarray([vil[r][v] for r, v in zip(r_i, v_i)], dtype=object)
    site_col = np.asarray([site[r][v][s] for r, v, s in zip(r_i, v_i, s_i)], dtype=object)
    data = PoolDataset(
        sizes, results,
        {"Region": region_col, "Village": village_col, "Site": site_col, "Year": years[y_i]},
        covariate_columns=("Region", "Year"),
        hierarchy_columns=("Village", "Site"),
    )

    r_c, v_c, s_c, y_c = idx.T
    site_year = pd.DataFrame({
        "Region": [regions[r] for r in r_c],
        "Village": [vil[r][v] for r, v in zip(r_c, v_c)],
        "Site": [site[r][v][s] for r, v, s in zip(r_c, v_c, s_c)],
        "Year": years[y_c],
        "Catch": flat_catch,
        "Prevalence": prev.reshape(-1),
    })
    region_year = (site_year.groupby(["Region", "Year"], sort=True)["Prevalence"].mean().reset_index())
    village_year = (site_year.groupby(["Region", "Village", "Year"], sort=False)["Prevalence"]
                    .mean().reset_index())
    effects = pd.DataFrame({
        "Region": [regions[r] for r in r_c[y_c == 0]],
        "Village": [vil[r][v] for r, v in zip(r_c[y_c == 0], v_c[y_c == 0])],
        "Site": [site[r][v][s] for r, v, s in zip(r_c[y_c == 0], v_c[y_c == 0], s_c[y_c == 0])],
        "VillageIntercept": u_v[r_c[y_c == 0], v_c[y_c == 0]],
        "VillageSlope": b_v[r_c[y_c == 0], v_c[y_c == 0]],
        "SiteIntercept": u_s[r_c[y_c == 0], v_c[y_c == 0], s_c[y_c == 0]],
    })
    return data, GroundTruth(site_year, region_year, village_year, effects)


# -- coverage experiment -----------------------------------------------------

METHODS = ("prev_freq", "prev_bayes", "hier_prev", "reg_bayes", "reg_bayes_hier")
STRATA = ("Region", "Year")
THREADS_ENV = "POOLPREV_THREADS"


@dataclass
class CoverageReport:
    """Per-method coverage of the true (Region, Year) marginal prevalence."""

    summary: pd.DataFrame  # Method, Coverage, MedianWidth, Intervals, Replicates, Warnings
    intervals: pd.DataFrame  # one row per replicate x method x cell
    warnings: list = field(default_factory=list)  # dicts with replicate, method, message
    level: float = 0.95

    def coverage(self, method) -> float:
        return float(self.summary.set_index("Method").loc[method, "Coverage"])

    def median_width(self, method) -> float:
        return float(self.summary.set_index("Method").loc[method, "MedianWidth"])


def default_workers() -> int:
    """Worker processes for replicates, from ``POOLPREV_THREADS`` (default 1)."""
    import os

    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise DomainError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise DomainError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _replicate_seeds(seed, replicates):
    states = np.random.SeedSequence([int(seed), 0xC0FE]).generate_state(2 * replicates)
    return [(int(states[2 * i]), int(states[2 * i + 1])) for i in range(replicates)]


def _rows_from_estimates(ests):
    return [(e.stratum["Region"], float(e.stratum["Year"]), e.interval_low, e.interval_high,
             list((e.diagnostics or {}).get("warnings", []))) for e in ests]


def _rows_from_table(tab):
    return [(r, float(y), lo, hi, []) for r, y, lo, hi in
            tab[["Region", "Year", "CrILow", "CrIHigh"]].itertuples(index=False)]


def _run_method(method, data, level, mcmc_cfg):
    from . import prevalence_bayes, prevalence_freq
    from .regression.bayes import fit_bayes
    from .regression.prevalence import get_prevalence

    if method == "prev_freq":
        return _rows_from_estimates(prevalence_freq.estimate_stratified(data, STRATA, level))
    if method == "prev_bayes":
        return _rows_from_estimates(prevalence_bayes.estimate_stratified(data, STRATA, None, level))
    if method == "hier_prev":
        hier = prevalence_bayes.HierSpec(("Village", "Site"))
        return _rows_from_estimates(prevalence_bayes.hier_prevalence(
            data, hier, strata=STRATA, level=level, mcmc_cfg=mcmc_cfg))
    formula = "Result ~ Region + Year" + (" + (1|Village/Site)" if method == "reg_bayes_hier" else "")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        model = fit_bayes(formula, data, mcmc_cfg=mcmc_cfg, level=level)
    rows = _rows_from_table(get_prevalence(model, level=level)["PopulationEffects"])
    msgs = list(model.fit_metadata.get("warnings", []))
    diag = model.fit_metadata["diagnostics"]
    if diag["max_rhat"] > 1.05:
        msgs.append(f"max split R-hat {diag['max_rhat']:.3f} exceeds 1.05")
    if msgs and rows:
        rows[0] = rows[0][:4] + (msgs,)
    return rows


def _one_replicate(args):
    i, cfg, sim_seed, mcmc_seed, methods, level, mcmc_cfg = args
    from .mcmc import McmcConfig

    data, truth = simulate(cfg.with_seed(sim_seed))
    lookup = truth.region_year_lookup()
    run_cfg = McmcConfig(mcmc_cfg.chains, mcmc_cfg.warmup_iters, mcmc_cfg.sampling_iters,
                         mcmc_seed, mcmc_cfg.target_accept, mcmc_cfg.initial_jitter_scale)
    records, msgs = [], []
    for m in methods:
        try:
            rows = _run_method(m, data, level, run_cfg)
        except Exception as exc:  # recorded, the experiment carries on
            msgs.append({"replicate": i, "method": m,
                         "message": f"failed ({type(exc).__name__}: {exc})"})
            continue
        for region, year, lo, hi, w in rows:
            true = lookup[(region, year)]
            records.append((i, m, region, year, true, lo, hi, bool(lo <= true <= hi), hi - lo))
            msgs += [{"replicate": i, "method": m, "message": f"{region}/{year:g}: {x}"} for x in w]
    return records, msgs


def coverage_experiment(cfg: SimConfig | None = None, replicates: int = 50, methods=METHODS,
                        level: float = 0.95, mcmc_cfg=None, workers: int | None = None
                        ) -> CoverageReport:
    """Simulate ``replicates`` surveys and score each method's intervals.

    Every method is stratified or adjusted by Region and Year and scored
    against the true mean site prevalence of each (Region, Year) cell.
    Simulation and MCMC seeds for each replicate derive from ``cfg.seed``
    alone, so the report does not depend on ``workers``.
    """
    from .mcmc import McmcConfig

    cfg = cfg or SimConfig()
    methods = tuple(methods)
    if replicates < 10:
        raise DomainError("coverage needs at least 10 replicates")
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise DomainError(f"unknown method(s) {unknown}; choose from {', '.join(METHODS)}")
    if not 0 < level < 1:
        raise DomainError("level must lie in (0, 1)")
    mcmc_cfg = mcmc_cfg or McmcConfig()
    workers = default_workers() if workers is None else int(workers)

    jobs = [(i, cfg, s, m, methods, level, mcmc_cfg)
            for i, (s, m) in enumerate(_replicate_seeds(cfg.seed, replicates))]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_one_replicate, jobs))
    else:
        results = [_one_replicate(j) for j in jobs]

    records = [r for rec, _ in results for r in rec]
    msgs = [m for _, ms in results for m in ms]
    cols = ["Replicate", "Method", "Region", "Year", "Truth", "Low", "High", "Covered", "Width"]
    iv = pd.DataFrame(records, columns=cols)
    summary = []
    for m in methods:
        sub = iv[iv["Method"] == m]
        summary.append({
            "Method": m,
            "Coverage": float(sub["Covered"].mean()) if len(sub) else float("nan"),
            "MedianWidth": float(sub["Width"].median()) if len(sub) else float("nan"),
            "Intervals": int(len(sub)),
            "Replicates": int(sub["Replicate"].nunique()),
            "Warnings": sum(w["method"] == m for w in msgs),
        })
    return CoverageReport(pd.DataFrame(summary), iv, msgs, level)
