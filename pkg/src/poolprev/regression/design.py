"""Design matrices for pooled regression.

Categorical covariates are treatment coded with the lexicographically first
level as reference; indicator columns are named ``<column><level>`` (e.g.
``RegionB``). Random-effect grouping levels are indexed in order of first
appearance in the data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ..dataset import PoolDataset
from ..errors import DataError, RankDeficiencyError
from .formula import ModelFormula, RandomTerm

INTERCEPT = "(Intercept)"


@dataclass(frozen=True)
class FixedSpec:
    name: str
    numeric: bool
    levels: tuple = ()  # sorted levels, reference first

    def column_names(self, first=False):
        if self.numeric:
            return [self.name]
        lv = self.levels if first else self.levels[1:]
        return [f"{self.name}{v}" for v in lv]


@dataclass
class RandomBlock:
    """Random-effect term evaluated on a dataset.

    ``index[i]`` is the group of row ``i``; ``z`` holds the per-row
    multipliers of each component (column 0 is all ones).
    """

    term: RandomTerm
    index: np.ndarray
    levels: list  # tuple of grouping values per group
    z: np.ndarray

    @property
    def n_groups(self):
        return len(self.levels)

    @property
    def n_comp(self):
        return self.z.shape[1]

    @property
    def component_names(self):
        return [INTERCEPT] + list(self.term.slopes)

    def level_labels(self):
        return [":".join(lv) for lv in self.levels]


def _as_frame(data) -> dict:
    if isinstance(data, PoolDataset):
        return data.columns
    if isinstance(data, pd.DataFrame):
        return {c: data[c].to_numpy() for c in data.columns}
    return dict(data)


def _numeric(col) -> bool:
    return np.asarray(col).dtype.kind in "biuf"


def _strings(col):
    out = []
    for v in col:
        if isinstance(v, (float, np.floating)) and float(v).is_integer():
            out.append(str(int(v)))
        else:
            out.append(str(v))
    return np.asarray(out, dtype=object)


@dataclass
class DesignInfo:
    """Everything needed to rebuild the fixed-effect matrix for new rows."""

    formula: ModelFormula
    fixed: list = field(default_factory=list)
    column_names: list = field(default_factory=list)

    @classmethod
    def from_data(cls, formula: ModelFormula, data) -> "DesignInfo":
        cols = _as_frame(data)
        missing = sorted(c for c in formula.columns if c not in cols)
        if missing:
            raise DataError(f"formula references unknown column(s): {', '.join(missing)}")
        specs = []
        for name in formula.fixed_terms:
            col = cols[name]
            if _numeric(col):
                specs.append(FixedSpec(name, True))
            else:
                levels = tuple(sorted(set(_strings(col))))
                specs.append(FixedSpec(name, False, levels))
        names = [INTERCEPT] if formula.intercept else []
        first_factor = not formula.intercept
        for spec in specs:
            full = first_factor and not spec.numeric
            names += spec.column_names(first=full)
            first_factor = first_factor and spec.numeric
        return cls(formula, specs, names)

    def fixed_matrix(self, data) -> np.ndarray:
        cols = _as_frame(data)
        if isinstance(data, (PoolDataset, pd.DataFrame)):
            n = len(data)
        else:
            n = len(next(iter(cols.values()))) if cols else 0
        blocks = [np.ones((n, 1))] if self.formula.intercept else []
        first_factor = not self.formula.intercept
        for spec in self.fixed:
            if spec.name not in cols:
                raise DataError(f"missing covariate column {spec.name!r}")
            col = cols[spec.name]
            if spec.numeric:
                try:
                    blocks.append(np.asarray(col, dtype=float)[:, None])
                except (TypeError, ValueError):
                    raise DataError(f"column {spec.name!r} must be numeric") from None
                continue
            values = _strings(col)
            unknown = sorted(set(values) - set(spec.levels))
            if unknown:
                raise DataError(f"column {spec.name!r} has unseen level(s): {', '.join(unknown)}")
            lv = spec.levels if first_factor else spec.levels[1:]
            blocks.append((values[:, None] == np.asarray(lv, dtype=object)[None]).astype(float))
            first_factor = False
        if not blocks:
            return np.zeros((n, 0))
        return np.hstack(blocks)

    def check_rank(self, X):
        """Raise :class:`RankDeficiencyError` naming any column that adds no rank."""
        if X.shape[1] == 0:
            return
        scale = np.linalg.norm(X, axis=0)
        scale[scale == 0] = 1.0
        Xs = X / scale
        tol = max(X.shape) * np.finfo(float).eps * 1e3
        kept, bad = [], []
        for j in range(X.shape[1]):
            if np.linalg.norm(Xs[:, j]) == 0:
                bad.append(self.column_names[j])
                continue
            if kept:
                A = Xs[:, kept]
                coef, *_ = np.linalg.lstsq(A, Xs[:, j], rcond=None)
                resid = np.linalg.norm(Xs[:, j] - A @ coef)
                if resid < tol * 1e3:
                    partners = [self.column_names[kept[i]] for i in np.flatnonzero(np.abs(coef) > 1e-8)]
                    bad.append(f"{self.column_names[j]} (with {', '.join(partners)})")
                    continue
            kept.append(j)
        if bad:
            raise RankDeficiencyError(bad)

    def to_dict(self):
        return {
            "fixed": [
                {"name": s.name, "numeric": s.numeric, "levels": list(s.levels)} for s in self.fixed
            ],
            "column_names": list(self.column_names),
        }

    @classmethod
    def from_dict(cls, formula, d):
        fixed = [FixedSpec(f["name"], f["numeric"], tuple(f["levels"])) for f in d["fixed"]]
        return cls(formula, fixed, list(d["column_names"]))


def group_keys(cols, grouping) -> np.ndarray:
    parts = [_strings(cols[g]) for g in grouping]
    if len(parts) == 1:
        return parts[0]
    return np.asarray(["\x1f".join(t) for t in zip(*parts)], dtype=object)


def random_block(term: RandomTerm, data, levels=None) -> RandomBlock:
    """Evaluate ``term`` on ``data``.

    With ``levels`` given (from a fitted model) rows are matched against
    them and rows from unseen groups get index ``-1``.
    """
    cols = _as_frame(data)
    for c in term.grouping + term.slopes:
        if c not in cols:
            raise DataError(f"missing column {c!r} for random term {term}")
    keys = group_keys(cols, term.grouping)
    if levels is None:
        uniq, first, inv = np.unique(keys, return_index=True, return_inverse=True)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        index = rank[inv.reshape(-1)]
        split = [_strings([cols[g][first[k]]])[0] for k in order for g in term.grouping]
        w = len(term.grouping)
        levels = [tuple(split[i * w:(i + 1) * w]) for i in range(order.size)]
    else:
        lookup = {"\x1f".join(lv): i for i, lv in enumerate(levels)}
        index = np.asarray([lookup.get(k, -1) for k in keys], dtype=np.int64)
    n = keys.size
    z = [np.ones(n)]
    for s in term.slopes:
        col = cols[s]
        if not _numeric(col):
            raise DataError(f"random slope {s!r} must be a numeric column")
        z.append(np.asarray(col, dtype=float))
    return RandomBlock(term, index.astype(np.int64), list(levels), np.column_stack(z))


@dataclass
class Design:
    info: DesignInfo
    X: np.ndarray
    sizes: np.ndarray
    results: np.ndarray
    blocks: list
    weights: np.ndarray

    @property
    def n_fixed(self):
        return self.X.shape[1]

    def compressed(self) -> "Design":
        """Merge identical rows (same covariates, groups, size and result)."""
        parts = [self.X, self.sizes[:, None].astype(float), self.results[:, None].astype(float)]
        for b in self.blocks:
            parts.append(b.index[:, None].astype(float))
            parts.append(b.z[:, 1:])
        key = np.hstack(parts)
        uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
        inv = inv.reshape(-1)
        w = np.bincount(inv, weights=self.weights, minlength=first.size)
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        rows = first[order]
        blocks = [
            RandomBlock(b.term, b.index[rows], b.levels, b.z[rows]) for b in self.blocks
        ]
        return Design(self.info, self.X[rows], self.sizes[rows], self.results[rows],
                      blocks, w[order])


def build_design(formula: ModelFormula, data: PoolDataset, check_rank=True, min_groups=2) -> Design:
    if len(data) == 0:
        raise DataError("dataset contains no pools")
    info = DesignInfo.from_data(formula, data)
    X = info.fixed_matrix(data)
    if check_rank:
        info.check_rank(X)
    blocks = [random_block(t, data) for t in formula.random_terms]
    for b in blocks:
        if b.n_groups < min_groups:
            raise DataError(f"grouping factor {b.term.group_key!r} needs at least {min_groups} levels")
    return Design(info, X, data.sizes.astype(float), data.results.copy(), blocks,
                  np.ones(len(data)))


def nested_in(fine: RandomBlock, coarse: RandomBlock) -> bool:
    """True when every group of ``fine`` lies inside a single group of ``coarse``."""
    m = np.full(fine.n_groups, -1)
    for f, c in zip(fine.index, coarse.index):
        if m[f] == -1:
            m[f] = c
        elif m[f] != c:
            return False
    return True


def parent_map(fine: RandomBlock, coarse: RandomBlock) -> np.ndarray:
    m = np.full(fine.n_groups, -1, dtype=np.int64)
    m[fine.index] = coarse.index
    return m
