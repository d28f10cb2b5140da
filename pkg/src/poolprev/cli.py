"""Command-line interface.

Every subcommand reads pooled test results from CSV (columns ``Result`` and
``NumInPool`` plus any covariates) and writes CSV or JSON to a file or to
standard output. Numbers carry 9 significant digits in CSV and full
round-trip precision in JSON. Files are replaced atomically, so a failed
run leaves earlier outputs untouched.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import __version__
from .dataset import PoolDataset
from .errors import DataError, DomainError, NumericalError, ParseError
from .io import atomic_write

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

_TRUE = {"1", "true", "pos"}
_FALSE = {"0", "false", "neg"}


class UsageError(Exception):
    def __init__(self, message, usage=""):
        super().__init__(message)
        self.usage = usage


@dataclass
class RunConfig:
    command: str
    input: str | None = None
    output: str | None = None
    output_format: str = "csv"
    result_column: str = "Result"
    size_column: str = "NumInPool"
    prior_alpha: float = 0.5
    prior_beta: float = 0.5
    prior_absent: float | None = None
    hierarchy: tuple = ()
    stratify: tuple = ()
    formula: str | None = None
    link: str = "logit"
    chains: int = 4
    warmup: int = 1000
    samples: int = 1000
    seed: int = 0
    level: float = 0.95
    threads: int | None = None
    options: dict = field(default_factory=dict)  # subcommand-specific paths and sizes


# -- CSV ingestion -----------------------------------------------------------


def _parse_result(raw, row, col):
    v = raw.strip().lower()
    if v in _TRUE:
        return 1
    if v in _FALSE:
        return 0
    raise ParseError(f"invalid result {raw!r} (expected 0/1, true/false or pos/neg)", row, col)


def _parse_size(raw, row, col):
    try:
        v = float(raw)
    except ValueError:
        raise ParseError(f"invalid pool size {raw!r}", row, col) from None
    if not math.isfinite(v) or v != int(v) or v < 1:
        raise ParseError(f"pool size must be a positive integer, got {raw!r}", row, col)
    return int(v)


def _numeric(values):
    try:
        return np.asarray([float(v) for v in values])
    except ValueError:
        return None


def ingest_csv(path, config: RunConfig | None = None) -> PoolDataset:
    """Read a pooled-results CSV.

    Row numbers in error messages count data rows from 1 (the header is
    not counted). Columns whose every value parses as a number are
    numeric; others are categorical. Hierarchy columns named in
    ``config`` are validated and given that role, every other column is a
    covariate.
    """
    cfg = config or RunConfig("ingest")
    rc, sc = cfg.result_column, cfg.size_column
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path} is empty")
        header = [h.strip() for h in header]
        dup = sorted({h for h in header if header.count(h) > 1})
        if dup:
            raise DataError(f"duplicate column(s) in header: {', '.join(dup)}")
        for need in (rc, sc) + tuple(cfg.hierarchy):
            if need not in header:
                raise DataError(f"required column {need!r} is missing from {path}")
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec or all(not v.strip() for v in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(rec)}", i)
            rows.append((i, rec))
    if not rows:
        raise DataError(f"{path} contains no data rows")
    pos = {h: j for j, h in enumerate(header)}
    numbers = [i for i, _ in rows]
    results = [_parse_result(r[pos[rc]], i, rc) for i, r in rows]
    sizes = [_parse_size(r[pos[sc]], i, sc) for i, r in rows]
    columns = {}
    for h in header:
        if h in (rc, sc):
            continue
        vals = [r[pos[h]].strip() for _, r in rows]
        for (i, _), v in zip(rows, vals):
            if v == "":
                raise ParseError("missing value", i, h)
        num = None if h in cfg.hierarchy else _numeric(vals)
        columns[h] = num if num is not None else np.asarray(vals, dtype=object)
    hier = tuple(cfg.hierarchy)
    covs = tuple(h for h in columns if h not in hier)
    return PoolDataset(sizes, results, columns, covs, hier, row_numbers=numbers)


# -- output ------------------------------------------------------------------


def frame_to_csv(df: pd.DataFrame) -> str:
    return df.to_csv(index=False, float_format="%.9g", lineterminator="\n")


def _json_value(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, dict):
        return {str(k): _json_value(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_json_value(x) for x in v]
    return v


def frame_records(df: pd.DataFrame) -> list:
    return [{c: _json_value(v) for c, v in zip(df.columns, row)}
            for row in df.itertuples(index=False, name=None)]


def json_text(obj) -> str:
    return json.dumps(_json_value(obj), indent=2) + "\n"


def _emit(text, path):
    if path is None or path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        atomic_write(path, text)


def _emit_table(df, cfg: RunConfig, extra=None, path=None):
    path = cfg.output if path is None else path
    if cfg.output_format == "json":
        payload = {"rows": frame_records(df)}
        if extra:
            payload.update(extra)
        _emit(json_text(payload), path)
    else:
        _emit(frame_to_csv(df), path)


def dataset_to_frame(data: PoolDataset, cfg: RunConfig | None = None) -> pd.DataFrame:
    cfg = cfg or RunConfig("emit")
    df = pd.DataFrame({cfg.result_column: data.results.astype(int),
                       cfg.size_column: data.sizes})
    for name, col in data.columns.items():
        df[name] = col
    return df


# -- subcommands ---------------------------------------------------------------


def _stratum_frame(ests, framework, strata):
    rows = []
    for e in ests:
        row = {c: e.stratum.get(c) for c in strata}
        row.update({
            "Framework": framework,
            "Method": e.method,
            "Estimate": e.point,
            "Low": e.interval_low,
            "High": e.interval_high,
            "Level": e.level,
            "ProbAbsent": np.nan if e.prob_absent is None else e.prob_absent,
            "NumPools": e.num_pools,
            "NumIndividuals": e.num_individuals,
        })
        rows.append(row)
    return rows


def _cmd_prev(cfg: RunConfig):
    from . import prevalence_bayes, prevalence_freq

    data = ingest_csv(cfg.input, cfg)
    _check_columns(data, cfg.stratify)
    beta = prevalence_bayes.BetaPrior(cfg.prior_alpha, cfg.prior_beta)
    prior = beta if cfg.prior_absent is None else prevalence_bayes.AbsencePrior(cfg.prior_absent, beta)
    freq = prevalence_freq.estimate_stratified(data, cfg.stratify, cfg.level)
    bayes = prevalence_bayes.estimate_stratified(data, cfg.stratify, prior, cfg.level)
    positives = [sub.num_positive for _, sub in prevalence_freq.stratify(data, cfg.stratify)]
    rows = []
    for framework, ests in (("frequentist", freq), ("bayesian", bayes)):
        rows += _stratum_frame(ests, framework, list(cfg.stratify))
    for r, k in zip(rows, positives * 2):
        r["NumPositive"] = k
    _emit_table(pd.DataFrame(rows), cfg)


def _mcmc_cfg(cfg: RunConfig):
    from .mcmc import McmcConfig

    return McmcConfig(cfg.chains, cfg.warmup, cfg.samples, cfg.seed)


def _cmd_hierprev(cfg: RunConfig):
    from . import prevalence_bayes

    data = ingest_csv(cfg.input, cfg)
    _check_columns(data, cfg.stratify)
    hier = prevalence_bayes.HierSpec(cfg.hierarchy, cfg.options.get("sd_scale", 1.0))
    prior = prevalence_bayes.BetaPrior(cfg.prior_alpha, cfg.prior_beta)
    ests = prevalence_bayes.hier_prevalence(data, hier, prior, cfg.stratify, cfg.level, _mcmc_cfg(cfg))
    rows = _stratum_frame(ests, "bayesian", list(cfg.stratify))
    for r, e in zip(rows, ests):
        del r["ProbAbsent"]
        r["MaxRhat"] = e.diagnostics["max_rhat"]
        r["MinESS"] = e.diagnostics["min_ess"]
        r["Warnings"] = "; ".join(e.diagnostics["warnings"])
    for e in ests:
        for w in e.diagnostics["warnings"]:
            _warn(f"stratum {_label(e.stratum)}: {w}")
    _emit_table(pd.DataFrame(rows), cfg)


def _label(stratum):
    return ",".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in stratum.items()) \
        or "all"


def _check_columns(data, names):
    for c in names:
        if c not in data.columns:
            raise DataError(f"unknown column {c!r}")


def _fit(cfg: RunConfig, bayesian):
    from .regression import fit_bayes, fit_glm, fit_glmm_laplace, parse_formula

    data = ingest_csv(cfg.input, cfg)
    formula = parse_formula(cfg.formula, cfg.link)
    if bayesian:
        return fit_bayes(formula, data, mcmc_cfg=_mcmc_cfg(cfg), level=cfg.level)
    if formula.random_terms:
        return fit_glmm_laplace(formula, data, level=cfg.level)
    return fit_glm(formula, data, level=cfg.level)


def _cmd_reg(cfg: RunConfig, bayesian=False):
    model = _fit(cfg, bayesian)
    for w in model.fit_metadata.get("warnings", []):
        _warn(w)
    if cfg.options.get("model"):
        model.save(cfg.options["model"])
    extra = {"variance_components": frame_records(model.variance_table())}
    _emit_table(model.coef_table(), cfg, extra=extra)
    if cfg.options.get("variance_output"):
        _emit_table(model.variance_table(), cfg, path=cfg.options["variance_output"])


def _cmd_predict(cfg: RunConfig):
    from .regression import FittedModel, get_prevalence

    path = cfg.options["model"]
    try:
        model = FittedModel.load(path)
    except OSError as exc:
        raise DataError(f"cannot read model artifact {path}: {exc.strerror}") from None
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise DataError(f"malformed model artifact {path}: {exc}") from None
    newdata = None
    if cfg.options.get("newdata"):
        nd = ingest_newdata(cfg.options["newdata"])
        newdata = nd
    tables = get_prevalence(model, newdata, level=cfg.level, seed=cfg.options.get("pred_seed"))
    out_dir = cfg.options["output_dir"]
    os.makedirs(out_dir, exist_ok=True)
    ext = "json" if cfg.output_format == "json" else "csv"
    for name, df in tables.items():
        _emit_table(df, cfg, path=os.path.join(out_dir, f"{name}.{ext}"))


def ingest_newdata(path) -> pd.DataFrame:
    """Covariate rows for prediction: numeric columns where every value parses."""
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except pd.errors.EmptyDataError:
        raise DataError(f"{path} is empty") from None
    df.columns = [c.strip() for c in df.columns]
    out = {}
    for c in df.columns:
        vals = [v.strip() for v in df[c]]
        num = _numeric(vals)
        out[c] = num if num is not None else np.asarray(vals, dtype=object)
    return pd.DataFrame(out)


def _sim_config(cfg: RunConfig):
    from .simulator import SimConfig

    o = cfg.options
    kw = {"seed": cfg.seed}
    for key in ("villages_per_region", "sites_per_village", "catch_mean", "catch_dispersion",
                "pool_max", "year_odds_ratio", "sd_village_intercept", "sd_site_intercept",
                "sd_village_slope"):
        if o.get(key) is not None:
            kw[key] = o[key]
    if o.get("region_prevalences"):
        kw["region_prevalences"] = tuple(o["region_prevalences"])
    if o.get("years"):
        kw["years"] = tuple(o["years"])
    return SimConfig(**kw)


def _cmd_simulate(cfg: RunConfig):
    from .simulator import simulate

    data, truth = simulate(_sim_config(cfg))
    df = dataset_to_frame(data, cfg)
    # write the ground truth first so the dataset is never left without it
    truth_path = cfg.options.get("truth") or _default_truth_path(cfg.output)
    atomic_write(truth_path, frame_to_csv(truth.site_year))
    if cfg.options.get("region_truth"):
        atomic_write(cfg.options["region_truth"], frame_to_csv(truth.region_year))
    atomic_write(cfg.output, frame_to_csv(df))


def _default_truth_path(path):
    root, ext = os.path.splitext(path)
    return f"{root}.truth{ext or '.csv'}"


def _cmd_coverage(cfg: RunConfig):
    from .mcmc import McmcConfig
    from .simulator import METHODS, coverage_experiment

    methods = cfg.options.get("methods") or METHODS
    mc = McmcConfig(cfg.chains, cfg.warmup, cfg.samples, 0)
    rep = coverage_experiment(_sim_config(cfg), cfg.options["replicates"], methods, cfg.level,
                              mcmc_cfg=mc, workers=cfg.threads)
    if cfg.options.get("intervals"):
        _emit_table(rep.intervals, cfg, path=cfg.options["intervals"])
    _emit_table(rep.summary, cfg, extra={"warnings": rep.warnings, "level": rep.level})


COMMANDS = {
    "prev": _cmd_prev,
    "hierprev": _cmd_hierprev,
    "reg": lambda c: _cmd_reg(c, bayesian=False),
    "regbayes": lambda c: _cmd_reg(c, bayesian=True),
    "predict": _cmd_predict,
    "simulate": _cmd_simulate,
    "coverage": _cmd_coverage,
}


def run(config: RunConfig) -> int:
    """Execute one subcommand; returns the process exit code."""
    try:
        COMMANDS[config.command](config)
    except (UsageError, DomainError) as exc:
        _error(str(exc))
        return EXIT_USAGE
    except DataError as exc:
        _error(str(exc))
        return EXIT_DATA
    except NumericalError as exc:
        _error(str(exc))
        return EXIT_NUMERICAL
    except OSError as exc:
        _error(f"{exc.filename or ''}: {exc.strerror or exc}".lstrip(": "))
        return EXIT_DATA
    return EXIT_OK


def _error(msg):
    print(f"poolprev: error: {msg}", file=sys.stderr)


def _warn(msg):
    print(f"poolprev: warning: {msg}", file=sys.stderr)


# -- argument parsing ------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}", self.format_usage())


def _names(text):
    out = tuple(s.strip() for s in text.split(",") if s.strip())
    if not out:
        raise argparse.ArgumentTypeError("expected a comma-separated list of column names")
    return out


def _floats(text):
    try:
        return tuple(float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poolprev", description="Prevalence estimation from pooled test results.")
    p.add_argument("--version", action="version", version=f"poolprev {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, data=True):
        if data:
            sp.add_argument("input", help="CSV of pool results")
            sp.add_argument("--result-column", default="Result")
            sp.add_argument("--size-column", default="NumInPool")
        sp.add_argument("-o", "--output", help="output file (default: standard output)")
        sp.add_argument("--format", dest="output_format", choices=("csv", "json"), default="csv")
        sp.add_argument("--level", type=float, default=0.95, help="interval level")

    def prior(sp):
        sp.add_argument("--prior-alpha", type=float, default=0.5)
        sp.add_argument("--prior-beta", type=float, default=0.5)

    def mcmc(sp):
        sp.add_argument("--chains", type=_positive_int, default=4)
        sp.add_argument("--warmup", type=_positive_int, default=1000)
        sp.add_argument("--samples", type=_positive_int, default=1000)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("prev", help="frequentist and Bayesian prevalence per stratum")
    common(sp)
    prior(sp)
    sp.add_argument("--stratify", type=_names, default=())
    sp.add_argument("--prior-absent", type=float, default=None,
                    help="prior probability that the marker is absent")

    sp = sub.add_parser("hierprev", help="hierarchical Bayesian prevalence per stratum")
    common(sp)
    prior(sp)
    mcmc(sp)
    sp.add_argument("--hierarchy", type=_names, required=True,
                    help="nested sampling levels, outermost first, e.g. Village,Site")
    sp.add_argument("--stratify", type=_names, default=())
    sp.add_argument("--sd-scale", type=float, default=1.0, help="half-normal scale of the SD priors")

    for name, helptext in (("reg", "frequentist pooled regression"),
                           ("regbayes", "Bayesian pooled regression")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--formula", required=True)
        sp.add_argument("--link", choices=("logit", "cloglog"), default="logit")
        sp.add_argument("--model", help="write the fitted-model artifact (JSON) here")
        sp.add_argument("--variance-output", help="write the variance-component table here")
        if name == "regbayes":
            mcmc(sp)

    sp = sub.add_parser("predict", help="prevalence tables from a fitted-model artifact")
    sp.add_argument("--model", required=True)
    sp.add_argument("--newdata", help="CSV of covariate rows to predict for")
    sp.add_argument("--output-dir", required=True, help="one table per hierarchy level is written here")
    sp.add_argument("--format", dest="output_format", choices=("csv", "json"), default="csv")
    sp.add_argument("--level", type=float, default=None)
    sp.add_argument("--seed", type=int, default=None,
                    help="seed for marginalising random effects (default: the model's)")

    def design(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--region-prevalences", type=_floats)
        sp.add_argument("--villages-per-region", type=_positive_int)
        sp.add_argument("--sites-per-village", type=_positive_int)
        sp.add_argument("--years", type=_floats)
        sp.add_argument("--year-odds-ratio", type=float)
        sp.add_argument("--catch-mean", type=float)
        sp.add_argument("--catch-dispersion", type=float)
        sp.add_argument("--pool-max", type=_positive_int)
        sp.add_argument("--sd-village-intercept", type=float)
        sp.add_argument("--sd-site-intercept", type=float)
        sp.add_argument("--sd-village-slope", type=float)

    sp = sub.add_parser("simulate", help="simulate a survey dataset with its ground truth")
    design(sp)
    sp.add_argument("-o", "--output", required=True, help="dataset CSV")
    sp.add_argument("--truth", help="site-year ground-truth CSV (default: <output>.truth.csv)")
    sp.add_argument("--region-truth", help="also write region-year marginal prevalences here")

    sp = sub.add_parser("coverage", help="interval coverage of the estimators over simulated surveys")
    common(sp, data=False)
    design(sp)
    sp.add_argument("--replicates", type=_positive_int, default=50)
    sp.add_argument("--methods", type=_names, default=None)
    sp.add_argument("--chains", type=_positive_int, default=4)
    sp.add_argument("--warmup", type=_positive_int, default=1000)
    sp.add_argument("--samples", type=_positive_int, default=1000)
    sp.add_argument("--intervals", help="write every scored interval here")
    sp.add_argument("--threads", type=_positive_int, default=None,
                    help="worker processes (default: $POOLPREV_THREADS or 1)")
    return p


_OPTION_KEYS = ("model", "variance_output", "newdata", "output_dir", "truth", "region_truth",
                "replicates", "methods", "intervals", "region_prevalences", "villages_per_region",
                "sites_per_village", "years", "year_odds_ratio", "catch_mean", "catch_dispersion",
                "pool_max", "sd_village_intercept", "sd_site_intercept", "sd_village_slope")


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    get = lambda k, d=None: getattr(ns, k, d)  # noqa: E731
    opts = {k: getattr(ns, k) for k in _OPTION_KEYS if hasattr(ns, k)}
    if ns.command == "hierprev":
        opts["sd_scale"] = ns.sd_scale
    if ns.command == "predict":
        opts["pred_seed"] = ns.seed
    return RunConfig(
        command=ns.command,
        input=get("input"),
        output=get("output"),
        output_format=get("output_format", "csv"),
        result_column=get("result_column", "Result"),
        size_column=get("size_column", "NumInPool"),
        prior_alpha=get("prior_alpha", 0.5),
        prior_beta=get("prior_beta", 0.5),
        prior_absent=get("prior_absent"),
        hierarchy=tuple(get("hierarchy") or ()),
        stratify=tuple(get("stratify") or ()),
        formula=get("formula"),
        link=get("link", "logit"),
        chains=get("chains", 4),
        warmup=get("warmup", 1000),
        samples=get("samples", 1000),
        seed=(get("seed") if ns.command != "predict" else 0) or 0,
        level=get("level") if get("level") is not None else 0.95,
        threads=get("threads"),
        options=opts,
    )


def _showwarning(message, category, filename, lineno, file=None, line=None):
    _warn(str(message))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        _error(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    if ns.command is None:
        parser.print_usage(sys.stderr)
        _error("a command is required")
        return EXIT_USAGE
    cfg = config_from_args(ns)
    if cfg.command == "predict" and ns.level is None:
        cfg.level = None
    with warnings.catch_warnings():
        warnings.showwarning = _showwarning
        warnings.simplefilter("default")
        return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
