"""Pool-level data containers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DataError


@dataclass(frozen=True)
class Pool:
    """One tested pool.

    ``hierarchy_path`` lists the sampling-unit identifiers, outermost
    first (e.g. ``("A-1", "A-1-3")`` for village then site).
    """

    size: int
    result: bool
    covariates: Mapping[str, object] = field(default_factory=dict)
    hierarchy_path: tuple[str, ...] = ()

    def __post_init__(self):
        if int(self.size) != self.size or self.size < 1:
            raise DataError(f"pool size must be a positive integer, got {self.size!r}")
        if self.result not in (True, False, 0, 1):
            raise DataError(f"pool result must be binary, got {self.result!r}")
        for h in self.hierarchy_path:
            if not isinstance(h, str) or not h:
                raise DataError("hierarchy identifiers must be non-empty strings")


def _as_column(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind in "biuf":
        return arr.astype(float)
    if arr.dtype.kind == "O":
        try:
            return arr.astype(float)
        except (TypeError, ValueError):
            pass
    return np.asarray([str(v) for v in arr], dtype=object)


class PoolDataset:
    """Ordered collection of pools backed by column arrays.

    Parameters
    ----------
    sizes, results : array_like
        Pool sizes (positive integers) and binary results.
    columns : mapping of str to array_like, optional
        Covariate and hierarchy columns, one value per pool. Numeric
        columns are stored as ``float64``; anything else is stored as
        strings (categorical).
    covariate_columns, hierarchy_columns : sequence of str, optional
        Declared roles. Columns not listed in either are kept but carry
        no role. Hierarchy columns are ordered outermost first.
    """

    def __init__(
        self,
        sizes,
        results,
        columns: Mapping[str, Sequence] | None = None,
        covariate_columns: Sequence[str] = (),
        hierarchy_columns: Sequence[str] = (),
        row_numbers=None,
    ):
        sizes = np.asarray(sizes)
        results = np.asarray(results)
        if sizes.ndim != 1 or results.shape != sizes.shape:
            raise DataError("sizes and results must be 1-d arrays of equal length")
        if sizes.size and (np.any(sizes < 1) or np.any(np.asarray(sizes, float) % 1 != 0)):
            raise DataError("pool sizes must be positive integers")
        if results.size and not np.all(np.isin(results, (0, 1))):
            raise DataError("pool results must be 0/1")
        self.sizes = sizes.astype(np.int64)
        self.results = results.astype(bool)
        self.columns: dict[str, np.ndarray] = {}
        for name, values in (columns or {}).items():
            col = _as_column(values)
            if col.shape != self.sizes.shape:
                raise DataError(f"column {name!r} has {col.size} values for {self.sizes.size} pools")
            self.columns[name] = col
        self.covariate_columns = tuple(covariate_columns)
        self.hierarchy_columns = tuple(hierarchy_columns)
        for name in self.covariate_columns + self.hierarchy_columns:
            if name not in self.columns:
                raise DataError(f"declared column {name!r} has no values")
        for name in self.hierarchy_columns:
            col = self.columns[name]
            if col.dtype != object:
                self.columns[name] = col = np.asarray([_fmt_id(v) for v in col], dtype=object)
            if any(v == "" for v in col):
                raise DataError(f"hierarchy column {name!r} contains empty identifiers")
        self.row_numbers = (
            np.arange(1, self.sizes.size + 1) if row_numbers is None else np.asarray(row_numbers)
        )

    # construction -----------------------------------------------------

    @classmethod
    def from_pools(cls, pools: Sequence[Pool], covariate_columns=(), hierarchy_columns=()):
        covariate_columns = tuple(covariate_columns)
        hierarchy_columns = tuple(hierarchy_columns)
        cols: dict[str, list] = {c: [] for c in covariate_columns + hierarchy_columns}
        for i, pool in enumerate(pools):
            missing = [c for c in covariate_columns if c not in pool.covariates]
            if missing:
                raise DataError(f"pool {i} has no value for column {missing[0]!r}")
            if len(pool.hierarchy_path) != len(hierarchy_columns):
                raise DataError(
                    f"pool {i} has hierarchy depth {len(pool.hierarchy_path)}, "
                    f"expected {len(hierarchy_columns)}"
                )
            for c in covariate_columns:
                cols[c].append(pool.covariates[c])
            for c, h in zip(hierarchy_columns, pool.hierarchy_path):
                cols[c].append(h)
        return cls(
            [p.size for p in pools],
            [int(p.result) for p in pools],
            cols,
            covariate_columns,
            hierarchy_columns,
        )

    @classmethod
    def from_frame(cls, df: pd.DataFrame, result="Result", size="NumInPool",
                   covariate_columns=None, hierarchy_columns=()):
        if covariate_columns is None:
            covariate_columns = [c for c in df.columns if c not in (result, size)
                                 and c not in hierarchy_columns]
        names = list(dict.fromkeys(list(covariate_columns) + list(hierarchy_columns)))
        return cls(
            df[size].to_numpy(),
            df[result].to_numpy().astype(int),
            {c: df[c].to_numpy() for c in names},
            covariate_columns,
            hierarchy_columns,
        )

    def to_frame(self, result="Result", size="NumInPool") -> pd.DataFrame:
        data = {name: col for name, col in self.columns.items()}
        data[size] = self.sizes
        data[result] = self.results.astype(int)
        return pd.DataFrame(data)

    # views ------------------------------------------------------------

    def __len__(self):
        return int(self.sizes.size)

    @property
    def pools(self) -> list[Pool]:
        out = []
        for i in range(len(self)):
            cov = {c: _scalar(self.columns[c][i]) for c in self.covariate_columns}
            path = tuple(str(self.columns[c][i]) for c in self.hierarchy_columns)
            out.append(Pool(int(self.sizes[i]), bool(self.results[i]), cov, path))
        return out

    @property
    def num_individuals(self) -> int:
        return int(self.sizes.sum())

    @property
    def num_positive_individuals(self) -> int:
        return int(self.sizes[self.results].sum())

    @property
    def num_positive(self) -> int:
        return int(self.results.sum())

    def is_numeric(self, name: str) -> bool:
        return self.column(name).dtype != object

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def subset(self, index) -> "PoolDataset":
        index = np.asarray(index)
        return PoolDataset(
            self.sizes[index],
            self.results[index].astype(int),
            {k: v[index] for k, v in self.columns.items()},
            self.covariate_columns,
            self.hierarchy_columns,
            row_numbers=self.row_numbers[index],
        )

    def with_roles(self, covariate_columns=None, hierarchy_columns=None) -> "PoolDataset":
        return PoolDataset(
            self.sizes,
            self.results.astype(int),
            self.columns,
            self.covariate_columns if covariate_columns is None else covariate_columns,
            self.hierarchy_columns if hierarchy_columns is None else hierarchy_columns,
            row_numbers=self.row_numbers,
        )

    def __repr__(self):
        return (f"PoolDataset({len(self)} pools, {self.num_individuals} individuals, "
                f"columns={list(self.columns)})")


def _scalar(v):
    return v.item() if isinstance(v, np.generic) else v


def _fmt_id(v) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return str(v)
