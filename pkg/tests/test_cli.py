import json
import os
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from poolprev import cli
from poolprev.cli import RunConfig, ingest_csv, main
from poolprev.errors import DataError, ParseError


@pytest.fixture(scope="module")
def survey(tmp_path_factory):
    d = tmp_path_factory.mktemp("survey")
    path = d / "sim.csv"
    assert main(["simulate", "--seed", "1", "-o", str(path)]) == 0
    return path


@pytest.fixture(scope="module")
def small_survey(tmp_path_factory):
    d = tmp_path_factory.mktemp("small")
    path = d / "small.csv"
    assert main(["simulate", "--seed", "2", "--villages-per-region", "3",
                 "--sites-per-village", "2", "-o", str(path)]) == 0
    return path


def write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestIngest:
    def test_tokens_and_blank_rows(self, tmp_path):
        p = write(tmp_path, "Result,NumInPool,Site\nPOS,10,a\n\nfalse,2.0,b\n1,3,a\n  , ,\n0,1,b\n")
        d = ingest_csv(p)
        assert d.results.tolist() == [1, 0, 1, 0]
        assert d.sizes.tolist() == [10, 2, 3, 1]
        assert list(d.columns["Site"]) == ["a", "b", "a", "b"]
        assert d.row_numbers.tolist() == [1, 3, 4, 6]

    def test_numeric_and_categorical_columns(self, tmp_path):
        p = write(tmp_path, "Result,NumInPool,Year,Village\n1,5,0,3\n0,5,1.5,4\n")
        d = ingest_csv(p, RunConfig("x", hierarchy=("Village",)))
        assert d.columns["Year"].dtype == float
        assert d.columns["Village"].dtype == object
        assert d.hierarchy_columns == ("Village",)

    @pytest.mark.parametrize("text, row, col", [
        ("Result,NumInPool\n1,5\nmaybe,5\n", 2, "Result"),
        ("Result,NumInPool\n1,5\n0,25.5\n", 2, "NumInPool"),
        ("Result,NumInPool\n1,0\n", 1, "NumInPool"),
        ("Result,NumInPool,Site\n1,5,a\n1,5,\n", 2, "Site"),
    ])
    def test_parse_errors_cite_location(self, tmp_path, text, row, col):
        with pytest.raises(ParseError) as err:
            ingest_csv(write(tmp_path, text))
        assert err.value.row == row and err.value.column == col
        assert f"row {row}" in str(err.value)

    def test_ragged_row(self, tmp_path):
        with pytest.raises(ParseError, match="row 2"):
            ingest_csv(write(tmp_path, "Result,NumInPool\n1,5\n1,5,7\n"))

    @pytest.mark.parametrize("text", [
        "Result,Size\n1,5\n", "Result,NumInPool,Result\n1,5,1\n", "", "Result,NumInPool\n",
    ])
    def test_structural_errors(self, tmp_path, text):
        with pytest.raises(DataError):
            ingest_csv(write(tmp_path, text))

    def test_missing_hierarchy_column(self, tmp_path):
        with pytest.raises(DataError, match="Site"):
            ingest_csv(write(tmp_path, "Result,NumInPool\n1,5\n"), RunConfig("x", hierarchy=("Site",)))


class TestSimulate:
    def test_byte_identical(self, survey, tmp_path):
        again = tmp_path / "again.csv"
        assert main(["simulate", "--seed", "1", "-o", str(again)]) == 0
        assert again.read_bytes() == survey.read_bytes()
        truth = tmp_path / "again.truth.csv"
        assert truth.read_bytes() == (survey.parent / "sim.truth.csv").read_bytes()

    def test_round_trip(self, survey):
        d = ingest_csv(str(survey), RunConfig("x", hierarchy=("Village", "Site")))
        assert cli.frame_to_csv(cli.dataset_to_frame(d)) == survey.read_text()

    def test_header(self, survey):
        assert survey.read_text().splitlines()[0] == "Result,NumInPool,Region,Village,Site,Year"

    def test_region_truth(self, tmp_path):
        rt = tmp_path / "rt.csv"
        assert main(["simulate", "--villages-per-region", "2", "--sites-per-village", "2",
                     "-o", str(tmp_path / "s.csv"), "--region-truth", str(rt)]) == 0
        assert len(pd.read_csv(rt)) == 9


class TestPrev:
    def test_stratified_rows(self, survey, capsys):
        assert main(["prev", str(survey), "--stratify", "Region,Year"]) == 0
        df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
        assert len(df) == 18
        assert set(df["Framework"]) == {"frequentist", "bayesian"}
        assert np.all((df["Low"] <= df["Estimate"]) & (df["Estimate"] <= df["High"]))

    def test_json_matches_csv(self, survey, tmp_path):
        c, j = tmp_path / "p.csv", tmp_path / "p.json"
        assert main(["prev", str(survey), "--stratify", "Region", "-o", str(c)]) == 0
        assert main(["prev", str(survey), "--stratify", "Region", "-o", str(j), "--format", "json"]) == 0
        a = pd.read_csv(c)
        b = pd.DataFrame(json.loads(j.read_text())["rows"])
        for col in ("Estimate", "Low", "High"):
            np.testing.assert_allclose(a[col], b[col], rtol=1e-8)
        assert list(a["Region"]) == list(b["Region"])

    def test_absence_prior(self, tmp_path, capsys):
        p = write(tmp_path, "Result,NumInPool\n0,1\n")
        assert main(["prev", p, "--prior-absent", "0.5"]) == 0
        df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
        assert df.loc[df["Framework"] == "bayesian", "ProbAbsent"].iloc[0] == pytest.approx(2 / 3)

    def test_unknown_stratum(self, survey):
        assert main(["prev", str(survey), "--stratify", "Nope"]) == 2


class TestRegression:
    def test_reg_coefficients(self, survey, capsys):
        assert main(["reg", str(survey), "--formula", "Result ~ Region + Year"]) == 0
        df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
        assert list(df["Term"]) == ["(Intercept)", "RegionB", "RegionC", "Year"]

    def test_predict_tables(self, survey, tmp_path):
        model = tmp_path / "m.json"
        assert main(["reg", str(survey), "--formula", "Result ~ Region + Year + (1|Village/Site)",
                     "--model", str(model), "-o", str(tmp_path / "coef.csv"),
                     "--variance-output", str(tmp_path / "var.csv")]) == 0
        out = tmp_path / "pred"
        assert main(["predict", "--model", str(model), "--output-dir", str(out)]) == 0
        counts = {f: len((out / f).read_text().splitlines()) for f in os.listdir(out)}
        assert counts == {"PopulationEffects.csv": 10, "Village.csv": 91, "Site.csv": 901}
        assert len(pd.read_csv(tmp_path / "var.csv")) == 2

    def test_predict_newdata(self, small_survey, tmp_path):
        model = tmp_path / "m.json"
        assert main(["reg", str(small_survey), "--formula", "Result ~ Region + Year",
                     "--model", str(model), "-o", str(tmp_path / "c.csv")]) == 0
        nd = write(tmp_path, "Region,Year\nA,3\nA,4\nA,5\n", "nd.csv")
        assert main(["predict", "--model", str(model), "--newdata", nd, "--output-dir",
                     str(tmp_path / "o"), "--format", "json"]) == 0
        rows = json.loads((tmp_path / "o" / "PopulationEffects.json").read_text())["rows"]
        est = [r["Estimate"] for r in rows]
        assert len(est) == 3
        bad = write(tmp_path, "Region\nA\n", "bad.csv")
        assert main(["predict", "--model", str(model), "--newdata", bad, "--output-dir",
                     str(tmp_path / "o2")]) == 2

    def test_regbayes_and_hierprev(self, small_survey, capsys):
        short = ["--chains", "2", "--warmup", "200", "--samples", "200", "--seed", "3"]
        assert main(["regbayes", str(small_survey), "--formula", "Result ~ Region"] + short) == 0
        df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
        assert {"CrILow", "CrIHigh", "Rhat", "ESS"} <= set(df.columns)
        assert main(["hierprev", str(small_survey), "--hierarchy", "Village,Site",
                     "--stratify", "Region"] + short) == 0
        df = pd.read_csv(pd.io.common.StringIO(capsys.readouterr().out))
        assert len(df) == 3 and "MaxRhat" in df.columns

    def test_separation_exits_numerical(self, tmp_path):
        rows = "".join(f"{int(i >= 10)},10,{'a' if i < 20 else 'b'}\n" for i in range(40))
        p = write(tmp_path, "Result,NumInPool,g\n" + rows)
        assert main(["reg", p, "--formula", "Result ~ g"]) == 3


class TestExitCodes:
    def test_usage(self, survey, capsys):
        assert main([]) == 1
        assert main(["prev"]) == 1
        assert "usage:" in capsys.readouterr().err
        assert main(["hierprev", str(survey)]) == 1
        assert main(["prev", str(survey), "--level", "2"]) == 1
        assert main(["--version"]) == 0

    def test_data_errors(self, tmp_path, capsys):
        assert main(["prev", str(tmp_path / "missing.csv")]) == 2
        p = write(tmp_path, "Result,NumInPool\n1,5\n0,25.5\n")
        assert main(["prev", p]) == 2
        err = capsys.readouterr().err
        assert "poolprev: error:" in err and "row 2" in err and "NumInPool" in err

    def test_formula_error(self, survey, capsys):
        assert main(["reg", str(survey), "--formula", "Result ~ Region*Year"]) == 2
        assert "Region*Year" in capsys.readouterr().err

    def test_thread_variable(self, monkeypatch, tmp_path):
        monkeypatch.setenv("POOLPREV_THREADS", "lots")
        assert main(["coverage", "--replicates", "10", "--methods", "prev_freq",
                     "--villages-per-region", "1", "--sites-per-village", "1"]) == 1

    def test_module_entry_point(self, tmp_path):
        p = write(tmp_path, "Result,NumInPool\n1,5\nbad,5\n")
        proc = subprocess.run([sys.executable, "-m", "poolprev", "prev", p],
                              capture_output=True, text=True)
        assert proc.returncode == 2
        assert proc.stdout == ""


class TestAtomicWrites:
    def test_failed_write_keeps_old_file(self, survey, tmp_path, monkeypatch):
        out = tmp_path / "out.csv"
        out.write_text("old\n")

        def boom(src, dst):
            raise OSError(28, "No space left on device", dst)

        monkeypatch.setattr(os, "replace", boom)
        assert main(["prev", str(survey), "-o", str(out)]) == 2
        assert out.read_text() == "old\n"
        assert sorted(os.listdir(tmp_path)) == ["out.csv"]

    def test_failed_run_leaves_no_output(self, tmp_path):
        bad = write(tmp_path, "Result,NumInPool\nx,1\n")
        out = tmp_path / "o.csv"
        assert main(["prev", bad, "-o", str(out)]) == 2
        assert not out.exists()


def test_coverage_command(tmp_path):
    out, iv = tmp_path / "cov.json", tmp_path / "iv.csv"
    args = ["coverage", "--replicates", "10", "--methods", "prev_freq,prev_bayes",
            "--villages-per-region", "2", "--sites-per-village", "2", "--seed", "3",
            "--format", "json", "-o", str(out), "--intervals", str(iv)]
    assert main(args) == 0
    first = out.read_bytes()
    assert main(args + ["--threads", "2"]) == 0
    assert out.read_bytes() == first
    summary = json.loads(first)
    assert [r["Method"] for r in summary["rows"]] == ["prev_freq", "prev_bayes"]
