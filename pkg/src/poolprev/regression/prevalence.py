"""Prevalence at every level of the sampling hierarchy from a fitted model.

Estimates are per-individual prevalences, so pool size plays no part.

Levels are the distinct groupings of the random terms, coarsest first. At
a level, a term contributes its group effect when the level's groups are
nested in the term's groups (including the level's own term); every other
term is set to zero (frequentist) or integrated out (Bayesian). A
Bayesian integrated-out term is averaged per posterior draw over a fixed
set of standard-normal draws, which gives the marginal prevalence.

New rows may carry covariate values outside the fitted range; they are
extrapolated without warning. Groups not seen in fitting are treated like
integrated-out terms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from ..errors import DataError
from ..model_core import link_inverse
from .design import random_block

N_MARGINAL = 64
_ZETA_STREAM = 0x5EED


@dataclass
class PrevalenceTable:
    """One data frame per hierarchy level, ``PopulationEffects`` first."""

    tables: dict = field(default_factory=dict)
    framework: str = "frequentist"

    def __getitem__(self, name):
        return self.tables[name]

    def __iter__(self):
        return iter(self.tables)

    def __len__(self):
        return len(self.tables)

    @property
    def names(self):
        return list(self.tables)

    def items(self):
        return self.tables.items()


def _levels(model, frame):
    """Return ``[(table_name, included_term_ids)]``, coarsest level first."""
    res = model.random_effects
    by_key: dict[str, list] = {}
    for i, r in enumerate(res):
        by_key.setdefault(r.term.group_key, []).append(i)
    blocks = [random_block(r.term, frame, r.levels) for r in res]
    out = []
    for key, ids in by_key.items():
        own = blocks[ids[0]]
        incl = [j for j, b in enumerate(blocks) if j in ids or _nested(own.index, b.index)]
        out.append((res[ids[0]].term.level_name, key, incl, len(res[ids[0]].levels)))
    out.sort(key=lambda t: (len(t[2]), t[3]))
    used, final = set(), []
    for name, key, incl, _ in out:
        label = name if name not in used else key
        used.add(label)
        final.append((label, incl))
    return final


def _nested(fine, coarse):
    ok = (fine >= 0) & (coarse >= 0)
    m = {}
    for f, c in zip(fine[ok], coarse[ok]):
        if m.setdefault(f, c) != c:
            return False
    return True


def _unique_rows(frame, cols):
    if not cols:
        return frame.iloc[:1][[]].reset_index(drop=True)
    return frame[cols].drop_duplicates().reset_index(drop=True)


def _id_columns(model, term_ids):
    cols = list(model.formula.fixed_terms)
    for j in term_ids:
        t = model.random_effects[j].term
        for c in t.slopes:
            if c not in cols:
                cols.append(c)
    groups = []
    for j in term_ids:
        for c in model.random_effects[j].term.grouping:
            if c not in groups:
                groups.append(c)
    return cols, groups


def get_prevalence(model, newdata=None, level=None, seed=None) -> PrevalenceTable:
    """Prevalence tables for ``model``.

    Parameters
    ----------
    newdata : DataFrame, optional
        Rows to predict for. Must contain every fixed-effect covariate;
        group-level tables are produced for the levels whose grouping
        columns it also contains. By default the unique observed
        combinations are used.
    level : float, optional
        Interval level; defaults to the model's.
    """
    level = model.level if level is None else level
    if newdata is not None:
        if not isinstance(newdata, pd.DataFrame):
            newdata = pd.DataFrame(newdata)
        missing = [c for c in model.design_info.formula.fixed_terms if c not in newdata.columns]
        for r in model.random_effects:
            missing += [c for c in r.term.slopes if c not in newdata.columns and c not in missing]
        if missing:
            raise DataError(f"newdata is missing covariate column(s): {', '.join(missing)}")
        frame = newdata.reset_index(drop=True)
    else:
        frame = model.frame
    if frame is None:
        raise DataError("model carries no observed covariate table; pass newdata")

    fixed_cols = list(model.formula.fixed_terms)
    slope_cols = []
    for r in model.random_effects:
        slope_cols += [c for c in r.term.slopes if c not in fixed_cols and c not in slope_cols]
    pop_cols = fixed_cols
    tables = {}
    rows = frame[pop_cols + slope_cols].reset_index(drop=True) if newdata is not None \
        else _unique_rows(frame, pop_cols + slope_cols)
    tables["PopulationEffects"] = _predict(model, rows, [], level, seed, pop_cols)

    if model.random_effects:
        for name, incl in _levels(model, model.frame if model.frame is not None else frame):
            cov_cols, grp_cols = _id_columns(model, incl)
            if any(c not in frame.columns for c in grp_cols):
                continue
            rows = frame[cov_cols + grp_cols].reset_index(drop=True) if newdata is not None \
                else _unique_rows(frame, cov_cols + grp_cols)
            tables[name] = _predict(model, rows, incl, level, seed, fixed_cols + grp_cols)
    return PrevalenceTable(tables, model.framework)


def _predict(model, rows, incl, level, seed, show_cols):
    X = model.design_info.fixed_matrix(rows) if len(model.coefficient_names) else np.zeros((len(rows), 0))
    n = len(rows)
    K = {}
    idx, z = {}, {}
    for j, r in enumerate(model.random_effects):
        if any(c not in rows.columns for c in r.term.slopes):
            continue
        if j in incl:
            b = random_block(r.term, rows, r.levels)
            idx[j], z[j] = b.index, b.z
        else:
            zz = [np.ones(n)] + [np.asarray(rows[c], dtype=float) for c in r.term.slopes]
            idx[j], z[j] = np.full(n, -1), np.column_stack(zz)
    a = 1 - level
    out = rows[[c for c in show_cols if c in rows.columns]].copy()
    if model.framework == "frequentist":
        beta, V = model.coefficients, model.covariance
        eta = X @ beta
        var = np.einsum("ij,jk,ik->i", X, V, X)
        for j in incl:
            r = model.random_effects[j]
            seen = idx[j] >= 0
            g = np.where(seen, idx[j], 0)
            eta = eta + np.where(seen, np.einsum("ik,ik->i", r.modes[g], z[j]), 0.0)
            S = np.outer(r.sd, r.sd)
            if r.corr is not None:
                S = S * np.array([[1.0, r.corr], [r.corr, 1.0]])
            cc = np.where(seen[:, None, None], r.cond_cov[g], S[None])
            var = var + np.einsum("ik,ikl,il->i", z[j], cc, z[j])
        half = special.ndtri(1 - a / 2) * np.sqrt(np.maximum(var, 0.0))
        out["Estimate"] = link_inverse(model.link, eta)
        out["CILow"] = link_inverse(model.link, eta - half)
        out["CIHigh"] = link_inverse(model.link, eta + half)
        return out

    from .bayes import term_draws

    B = model.beta_draws()
    S_n = B.shape[0]
    fixed = B @ X.T  # draws x rows
    draws_u = {j: term_draws(model, j) for j in idx}
    # terms integrated out per row
    marg = {j: idx[j] < 0 for j in idx}
    any_marg = any(m.any() for m in marg.values())
    if any_marg:
        ss = np.random.SeedSequence([int(model.seed or 0) if seed is None else int(seed), _ZETA_STREAM])
        rng = np.random.default_rng(ss)
        total_k = sum(draws_u[j][1].shape[1] for j in idx)
        zeta_all = rng.standard_normal((S_n, N_MARGINAL, total_k))
    est = np.empty(n)
    lo = np.empty(n)
    hi = np.empty(n)
    chunk = max(1, int(4_000_000 // (S_n * (N_MARGINAL if any_marg else 1))))
    for start in range(0, n, chunk):
        sl = slice(start, min(n, start + chunk))
        eta = fixed[:, sl]  # S x r
        extra = None
        off = 0
        for j in idx:
            u, L = draws_u[j]
            kk = L.shape[1]
            gi = idx[j][sl]
            zj = z[j][sl]
            seen = gi >= 0
            if seen.any():
                contrib = np.einsum("srk,rk->sr", u[:, np.where(seen, gi, 0), :], zj)
                eta = eta + np.where(seen[None], contrib, 0.0)
            if (~seen).any():
                e = np.einsum("smk,sjk->smj", zeta_all[:, :, off:off + kk], L)  # S x M x K
                c = np.einsum("smk,rk->smr", e, zj) * (~seen)[None, None]
                extra = c if extra is None else extra + c
            off += kk
        if extra is None:
            prev = link_inverse(model.link, eta)
        else:
            prev = link_inverse(model.link, eta[:, None, :] + extra).mean(axis=1)
        est[sl] = prev.mean(axis=0)
        lo[sl] = np.quantile(prev, a / 2, axis=0)
        hi[sl] = np.quantile(prev, 1 - a / 2, axis=0)
    out["Estimate"] = est
    out["CrILow"] = lo
    out["CrIHigh"] = hi
    return out
