"""Fitted-model container and its JSON persistence."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from ..errors import DataError
from ..mcmc import PosteriorDraws
from .design import DesignInfo
from .formula import RandomTerm, parse_formula

SCHEMA_VERSION = 1


@dataclass
class RandomEffectSummary:
    """Per-term variance components and group effects.

    Frequentist fits store conditional modes and their conditional
    covariances; Bayesian fits store posterior means in ``modes`` and the
    positions of the term's parameters in ``layout``.
    """

    term: RandomTerm
    levels: list
    sd: np.ndarray
    corr: float | None = None
    modes: np.ndarray | None = None
    cond_cov: np.ndarray | None = None
    layout: dict | None = None

    @property
    def n_groups(self):
        return len(self.levels)

    @property
    def n_comp(self):
        return 1 + len(self.term.slopes)

    @property
    def component_names(self):
        return ["(Intercept)"] + list(self.term.slopes)


@dataclass
class FittedModel:
    formula: object
    framework: str
    design_info: DesignInfo
    coefficients: np.ndarray
    covariance: np.ndarray | None
    random_effects: list
    fit_metadata: dict = field(default_factory=dict)
    level: float = 0.95
    draws: PosteriorDraws | None = None
    seed: int | None = None
    frame: pd.DataFrame | None = None  # unique observed covariate/group rows

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.size != len(self.design_info.column_names):
            raise DataError("coefficient count does not match the design")

    @property
    def coefficient_names(self):
        return list(self.design_info.column_names)

    @property
    def link(self):
        return self.formula.link

    def coef(self) -> dict:
        return dict(zip(self.coefficient_names, map(float, self.coefficients)))

    def beta_draws(self) -> np.ndarray:
        """Posterior draws of the fixed effects, ``(draws, p)``."""
        if self.draws is None:
            raise DataError("model has no posterior draws")
        p = len(self.coefficient_names)
        return self.draws.flat()[:, :p]

    def coef_table(self) -> pd.DataFrame:
        names = self.coefficient_names
        a = 1 - self.level
        if self.framework == "frequentist":
            se = np.sqrt(np.diag(self.covariance))
            z = special.ndtri(1 - a / 2)
            return pd.DataFrame({
                "Term": names,
                "Estimate": self.coefficients,
                "StdError": se,
                "CILow": self.coefficients - z * se,
                "CIHigh": self.coefficients + z * se,
            })
        bd = self.beta_draws()
        p = len(names)
        return pd.DataFrame({
            "Term": names,
            "Estimate": bd.mean(axis=0),
            "StdError": bd.std(axis=0, ddof=1),
            "CrILow": np.quantile(bd, a / 2, axis=0),
            "CrIHigh": np.quantile(bd, 1 - a / 2, axis=0),
            "Rhat": self.draws.rhat[:p],
            "ESS": self.draws.ess[:p],
        })

    def interval(self, name):
        t = self.coef_table().set_index("Term")
        lo, hi = ("CILow", "CIHigh") if self.framework == "frequentist" else ("CrILow", "CrIHigh")
        return float(t.loc[name, lo]), float(t.loc[name, hi])

    def variance_table(self) -> pd.DataFrame:
        rows = []
        for re in self.random_effects:
            for name, sd in zip(re.component_names, re.sd):
                rows.append({"Group": re.term.group_key, "Component": name, "SD": float(sd)})
            if re.corr is not None:
                rows.append({"Group": re.term.group_key, "Component": "Correlation",
                             "SD": float(re.corr)})
        return pd.DataFrame(rows, columns=["Group", "Component", "SD"])

    # -- persistence -----------------------------------------------------

    def to_dict(self, draws_file=None) -> dict:
        from .. import __version__

        out = {
            "schema_version": SCHEMA_VERSION,
            "software": {"name": "poolprev", "version": __version__},
            "framework": self.framework,
            "formula": str(self.formula),
            "link": self.formula.link.value,
            "level": self.level,
            "seed": self.seed,
            "design": self.design_info.to_dict(),
            "coefficients": [
                {"name": n, "estimate": float(v)} for n, v in zip(self.coefficient_names, self.coefficients)
            ],
            "covariance": None if self.covariance is None else np.asarray(self.covariance).tolist(),
            "random_effects": [_re_to_dict(r) for r in self.random_effects],
            "fit_metadata": _jsonable(self.fit_metadata),
            "observed": None if self.frame is None else {
                c: _jsonable(self.frame[c].to_numpy()) for c in self.frame.columns
            },
        }
        if self.draws is not None:
            out["draws"] = {
                "file": draws_file,
                "parameter_names": list(self.draws.parameter_names),
                "chains": int(self.draws.draws.shape[0]),
                "iterations": int(self.draws.draws.shape[1]),
                "rhat": self.draws.rhat.tolist(),
                "ess": self.draws.ess.tolist(),
                "rhat_degenerate": self.draws.rhat_degenerate.tolist(),
                "acceptance_rate": self.draws.acceptance_rate.tolist(),
                "warnings": list(self.draws.warnings),
            }
        return out

    def to_json_text(self, draws_file=None) -> str:
        return json.dumps(self.to_dict(draws_file), indent=2, allow_nan=True) + "\n"

    def draws_frame(self) -> pd.DataFrame:
        C, S, D = self.draws.draws.shape
        df = pd.DataFrame(self.draws.draws.reshape(C * S, D), columns=self.draws.parameter_names)
        df.insert(0, "iteration", np.tile(np.arange(S), C))
        df.insert(0, "chain", np.repeat(np.arange(C), S))
        return df

    @classmethod
    def from_dict(cls, d, draws_frame=None) -> "FittedModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported model artifact schema {d.get('schema_version')!r}")
        f = parse_formula(d["formula"], d["link"])
        info = DesignInfo.from_dict(f, d["design"])
        res = [_re_from_dict(r) for r in d["random_effects"]]
        draws = None
        if d.get("draws") is not None:
            meta = d["draws"]
            if draws_frame is None:
                raise DataError("Bayesian model artifact needs its draws file")
            C, S = meta["chains"], meta["iterations"]
            arr = draws_frame[meta["parameter_names"]].to_numpy(dtype=float)
            if arr.shape[0] != C * S:
                raise DataError("draws file does not match the artifact")
            draws = PosteriorDraws(
                arr.reshape(C, S, -1), meta["parameter_names"], np.asarray(meta["rhat"], float),
                np.asarray(meta["ess"], float), np.asarray(meta["rhat_degenerate"], bool),
                np.asarray(meta["acceptance_rate"], float), list(meta["warnings"]),
            )
        cov = None if d["covariance"] is None else np.asarray(d["covariance"], float)
        return cls(
            formula=f,
            framework=d["framework"],
            design_info=info,
            coefficients=np.asarray([c["estimate"] for c in d["coefficients"]], float),
            covariance=cov,
            random_effects=res,
            fit_metadata=d.get("fit_metadata", {}),
            level=d.get("level", 0.95),
            draws=draws,
            seed=d.get("seed"),
            frame=None if d.get("observed") is None else pd.DataFrame(d["observed"]),
        )

    def save(self, path):
        """Write the JSON artifact (and a draws CSV next to it for Bayesian fits)."""
        from ..io import atomic_write

        draws_file = None
        if self.draws is not None:
            draws_file = os.path.basename(path) + ".draws.csv"
            text = self.draws_frame().to_csv(index=False, float_format="%.17g", lineterminator="\n")
            atomic_write(os.path.join(os.path.dirname(path) or ".", draws_file), text)
        atomic_write(path, self.to_json_text(draws_file))

    @classmethod
    def load(cls, path) -> "FittedModel":
        with open(path) as fh:
            d = json.load(fh)
        frame = None
        if d.get("draws") is not None:
            frame = pd.read_csv(os.path.join(os.path.dirname(path) or ".", d["draws"]["file"]),
                                float_precision="round_trip")
        return cls.from_dict(d, frame)


def observed_frame(formula, data) -> pd.DataFrame:
    """Unique rows of the columns a formula uses, in order of first appearance."""
    cols = list(formula.fixed_terms)
    for t in formula.random_terms:
        cols += [c for c in t.slopes + t.grouping if c not in cols]
    if not cols:
        return pd.DataFrame(index=range(1))
    df = pd.DataFrame({c: data.column(c) for c in cols})
    return df.drop_duplicates().reset_index(drop=True)


def _re_to_dict(r: RandomEffectSummary):
    return {
        "grouping": list(r.term.grouping),
        "slopes": list(r.term.slopes),
        "levels": [list(lv) for lv in r.levels],
        "sd": np.asarray(r.sd, float).tolist(),
        "corr": r.corr,
        "modes": None if r.modes is None else np.asarray(r.modes).tolist(),
        "cond_cov": None if r.cond_cov is None else np.asarray(r.cond_cov).tolist(),
        "layout": r.layout,
    }


def _re_from_dict(d):
    arr = lambda v: None if v is None else np.asarray(v, float)  # noqa: E731
    return RandomEffectSummary(
        term=RandomTerm(tuple(d["grouping"]), tuple(d["slopes"])),
        levels=[tuple(lv) for lv in d["levels"]],
        sd=np.asarray(d["sd"], float),
        corr=d["corr"],
        modes=arr(d["modes"]),
        cond_cov=arr(d["cond_cov"]),
        layout=d.get("layout"),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj
