"""Pooled-binomial regression: fixed and mixed effects, frequentist and Bayesian."""

from .bayes import BayesPriors, fit_bayes
from .formula import ModelFormula, RandomTerm, parse_formula
from .glm import fit_glm
from .glmm import fit_glmm_laplace
from .model import FittedModel
from .prevalence import PrevalenceTable, get_prevalence

__all__ = [
    "BayesPriors",
    "FittedModel",
    "ModelFormula",
    "PrevalenceTable",
    "RandomTerm",
    "fit_bayes",
    "fit_glm",
    "fit_glmm_laplace",
    "get_prevalence",
    "parse_formula",
]
