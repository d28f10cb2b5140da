import numpy as np
import pandas as pd
import pytest

from poolprev.dataset import PoolDataset
from poolprev.errors import DataError, NumericalError, RankDeficiencyError
from poolprev.model_core import link_inverse, pool_positive_prob
from poolprev.prevalence_freq import mle
from poolprev.regression import FittedModel, fit_glm, get_prevalence, parse_formula
from poolprev.regression.design import build_design
from poolprev.regression.glm import bernoulli_offset_glm, loglik_parts, newton_fit

# coefficients of the non-hierarchical logit fit reported for the reference survey
REFERENCE = {"(Intercept)": -5.0555273, "RegionB": 1.2260503, "RegionC": 1.7476965,
             "Year": -0.1287181}


def random_design(seed, n=400):
    rng = np.random.default_rng(seed)
    region = rng.choice(np.array(["A", "B", "C"], dtype=object), n)
    x = rng.normal(0, 1, n)
    sizes = rng.integers(1, 30, n)
    eta = -4 + 0.8 * (region == "B") + 1.2 * (region == "C") + 0.3 * x
    p = link_inverse("cloglog", eta)
    res = (rng.random(n) < pool_positive_prob(p, sizes)).astype(int)
    return PoolDataset(sizes, res, {"Region": region, "x": x}, covariate_columns=("Region", "x"))


class TestIntercept:
    def test_cloglog_matches_mle(self):
        d = random_design(1)
        m = fit_glm("Result ~ 1", d, link="cloglog")
        b0 = m.coefficients[0]
        assert -np.expm1(-np.exp(b0)) == pytest.approx(mle(d), abs=1e-8)

    def test_logit_matches_mle(self):
        d = random_design(2)
        m = fit_glm("Result ~ 1", d)
        assert link_inverse("logit", m.coefficients[0]) == pytest.approx(mle(d), abs=1e-8)


def test_cloglog_offset_equivalence():
    worst = 0.0
    for seed in range(20):
        d = random_design(100 + seed)
        m = fit_glm("Result ~ Region + x", d, link="cloglog")
        design = build_design(m.formula, d)
        beta = bernoulli_offset_glm(design.X, d.results.astype(float), np.log(d.sizes))
        worst = max(worst, float(np.max(np.abs(beta - m.coefficients))))
    assert worst < 1e-6


@pytest.mark.parametrize("link", ["logit", "cloglog"])
def test_gradient_and_hessian(link):
    d = random_design(5)
    f = parse_formula("Result ~ Region + x", link)
    des = build_design(f, d)
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(50):
        beta = np.array([-4.0, 0.8, 1.2, 0.3]) + rng.normal(0, 0.5, 4)
        ll, g, H, _ = loglik_parts(beta, des.X, des.sizes, des.results, des.weights, f.link)
        fd_g = np.empty(4)
        fd_H = np.empty((4, 4))
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            lp, gp, _, _ = loglik_parts(beta + e, des.X, des.sizes, des.results, des.weights, f.link)
            lm, gm, _, _ = loglik_parts(beta - e, des.X, des.sizes, des.results, des.weights, f.link)
            fd_g[j] = (lp - lm) / (2 * h)
            fd_H[:, j] = (gp - gm) / (2 * h)
        np.testing.assert_allclose(g, fd_g, rtol=1e-5, atol=1e-6)
        np.testing.assert_allclose(H, fd_H, rtol=1e-5, atol=1e-5)


def test_reference_relabelling_leaves_prevalence_invariant():
    d = random_design(7)
    a = fit_glm("Result ~ Region + x", d)
    relabel = np.array([{"A": "Z", "B": "B", "C": "C"}[v] for v in d.columns["Region"]], dtype=object)
    d2 = PoolDataset(d.sizes, d.results.astype(int), {"Region": relabel, "x": d.columns["x"]},
                     covariate_columns=("Region", "x"))
    b = fit_glm("Result ~ Region + x", d2)
    assert a.coefficient_names != b.coefficient_names
    ta = get_prevalence(a)["PopulationEffects"]
    tb = get_prevalence(b)["PopulationEffects"]
    np.testing.assert_allclose(ta["Estimate"], tb["Estimate"], atol=1e-8, rtol=0)
    np.testing.assert_allclose(ta["CILow"], tb["CILow"], atol=1e-8, rtol=0)


def test_constant_covariate_is_rank_deficient():
    d = random_design(3)
    d = PoolDataset(d.sizes, d.results.astype(int), {"c": np.full(len(d), 2.0)},
                    covariate_columns=("c",))
    with pytest.raises(RankDeficiencyError, match="c"):
        fit_glm("Result ~ c", d)


def test_separation_reports_gradient():
    sizes = np.full(40, 10)
    g = np.array(["a"] * 20 + ["b"] * 20, dtype=object)
    res = np.r_[np.zeros(10), np.ones(10), np.ones(20)].astype(int)
    d = PoolDataset(sizes, res, {"g": g}, covariate_columns=("g",))
    with pytest.raises(NumericalError, match="gradient norm"):
        fit_glm("Result ~ g", d)
    d = PoolDataset(sizes, np.r_[res[:20], np.zeros(20)].astype(int), {"g": g},
                    covariate_columns=("g",))
    with pytest.raises(NumericalError, match="gb"):
        fit_glm("Result ~ g", d)


def test_random_terms_rejected(default_data):
    with pytest.raises(DataError):
        fit_glm("Result ~ Year + (1|Village)", default_data)


def test_unknown_column():
    with pytest.raises(DataError, match="Nope"):
        fit_glm("Result ~ Nope", random_design(1))


def test_newton_covariance_is_inverse_information():
    d = random_design(9)
    des = build_design(parse_formula("Result ~ Region + x"), d)
    beta, cov, ll, _ = newton_fit(des.X, des.sizes, des.results, des.weights)
    _, g, H, _ = loglik_parts(beta, des.X, des.sizes, des.results, des.weights, "logit")
    assert np.max(np.abs(g)) < 1e-8
    np.testing.assert_allclose(cov @ -H, np.eye(4), atol=1e-8)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


@pytest.fixture(scope="module")
def model(default_data):
    return fit_glm("Result ~ Region + Year", default_data)


class TestDefaultSurvey:
    def test_coefficients_plausible(self, model):
        assert model.coefficient_names == list(REFERENCE)
        for name, ref in REFERENCE.items():
            assert abs(model.coef()[name] - ref) < 0.35

    def test_one_table_without_hierarchy(self, model):
        tab = get_prevalence(model)
        assert tab.names == ["PopulationEffects"]
        pe = tab["PopulationEffects"]
        assert len(pe) == 9
        assert list(pe.columns) == ["Region", "Year", "Estimate", "CILow", "CIHigh"]
        assert np.all((pe["CILow"] <= pe["Estimate"]) & (pe["Estimate"] <= pe["CIHigh"]))

    def test_forward_projection(self, model):
        nd = pd.DataFrame({"Region": ["A", "A", "A"], "Year": [3.0, 4.0, 5.0]})
        est = get_prevalence(model, nd)["PopulationEffects"]["Estimate"].to_numpy()
        assert model.coef()["Year"] < 0
        assert np.all(np.diff(est) < 0)

    def test_newdata_missing_column(self, model):
        with pytest.raises(DataError, match="Year"):
            get_prevalence(model, pd.DataFrame({"Region": ["A"]}))

    def test_unseen_level(self, model):
        with pytest.raises(DataError):
            get_prevalence(model, pd.DataFrame({"Region": ["Q"], "Year": [0.0]}))

    def test_artifact_round_trip(self, model, tmp_path):
        path = tmp_path / "m.json"
        model.save(str(path))
        back = FittedModel.load(str(path))
        assert back.coefficient_names == model.coefficient_names
        assert np.array_equal(back.coefficients, model.coefficients)
        assert np.array_equal(back.covariance, model.covariance)
        pd.testing.assert_frame_equal(get_prevalence(back)["PopulationEffects"],
                                      get_prevalence(model)["PopulationEffects"])


def test_intercept_only_without_columns():
    d = PoolDataset(np.array([5, 5, 3, 10]), np.array([1, 0, 0, 1]))
    m = fit_glm("Result ~ 1", d, link="cloglog")
    assert -np.expm1(-np.exp(m.coefficients[0])) == pytest.approx(mle(d), abs=1e-8)
