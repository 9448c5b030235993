import json

import numpy as np
import pytest

from callback_mnar import __version__
from callback_mnar.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_SOLVER, main, sidecar_paths
from callback_mnar.io import DataFormatError, collapse_calls, load_csv, write_csv


def _csv(tmp_path, text, name="d.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_three_line_file_loads(fixtures):
    data = load_csv(fixtures / "three_records.csv")
    assert data.n == 3
    assert list(data.covariate_names) == ["const", "x1"]
    np.testing.assert_array_equal(data.r1, [1, 0, 0])
    np.testing.assert_array_equal(data.r2, [1, 1, 0])
    assert np.isnan(data.y[2])


@pytest.mark.parametrize("row,message", [
    ("0.1,1.0,1,0", "line 3: callback monotonicity"),
    ("0.1,NA,1,1", "line 3: outcome missing for respondent"),
    ("0.1,2.0,0,0", "line 3: outcome present for nonrespondent"),
    ("0.1,abc,1,1", "line 3: cannot parse y"),
    ("0.1,1.0,2,1", "line 3: r1 must be 0 or 1"),
    ("0.1,1.0,1", "line 3: expected 4 fields"),
])
def test_bad_rows_name_the_line(tmp_path, row, message):
    path = _csv(tmp_path, "x1,y,r1,r2\n0.5,1.0,1,1\n" + row + "\n")
    with pytest.raises(DataFormatError, match=message):
        load_csv(path)


def test_header_problems(tmp_path):
    with pytest.raises(DataFormatError, match="required column"):
        load_csv(_csv(tmp_path, "x1,y,r1\n0.5,1.0,1\n"))
    with pytest.raises(DataFormatError, match="unknown covariate"):
        load_csv(_csv(tmp_path, "x1,y,r1,r2\n0.5,1.0,1,1\n"), ["x9"])


def test_csv_round_trip(tmp_path, tt_draw):
    path = tmp_path / "rt.csv"
    write_csv(tt_draw, path)
    back = load_csv(path)
    np.testing.assert_array_equal(back.x, tt_draw.x)
    np.testing.assert_array_equal(back.y, tt_draw.y)
    np.testing.assert_array_equal(back.r1, tt_draw.r1)
    np.testing.assert_array_equal(back.r2, tt_draw.r2)


def test_estimate_on_fixture(tmp_path, fixtures, capsys):
    out = tmp_path / "report.json"
    code = main(["estimate", "--data", str(fixtures / "tt_n3000_seed2024.csv"), "--out", str(out)])
    assert code == EXIT_OK
    rep = json.loads(out.read_text())
    truth = json.loads((fixtures / "tt_n3000_seed2024.truth.json").read_text())
    assert set(rep["results"]) == {"ipw", "reg", "dr", "cc"}
    dr = rep["results"]["dr"]
    assert dr["ci_lower"][0] <= truth["true_mu"] <= dr["ci_upper"][0]
    assert rep["version"] == __version__ and rep["tool"] == "callback-mnar"
    assert rep["config"]["methods"] == "ipw,reg,dr,cc"
    assert rep["data"]["n"] == 3000
    assert len(rep["results"]["dr"]["covariance"]) == 12
    assert "dr" in capsys.readouterr().out


def test_estimate_selected_covariates(tmp_path, fixtures):
    out = tmp_path / "r.json"
    code = main(["estimate", "--data", str(fixtures / "tt_n3000_seed2024.csv"), "--covariates", "x1",
                 "--methods", "dr", "--out", str(out)])
    assert code == EXIT_OK
    assert json.loads(out.read_text())["data"]["covariates"] == ["const", "x1"]


@pytest.mark.parametrize("extra", [
    ["--covariates", "x1,nope"],
    ["--methods", "calibration", "--a2", "linear+squares"],
    ["--bootstrap", "50"],
    ["--methods", "mle"],
])
def test_configuration_errors(tmp_path, fixtures, extra, capsys):
    out = tmp_path / "r.json"
    code = main(["estimate", "--data", str(fixtures / "tt_n3000_seed2024.csv"), "--out", str(out), *extra])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert json.loads(out.read_text())["status"].startswith("config error")


def test_unknown_flag_is_config_error():
    assert main(["estimate", "--bogus"]) == EXIT_CONFIG


def test_data_error(tmp_path, capsys):
    path = _csv(tmp_path, "x1,y,r1,r2\n0.5,1.0,1,1\n0.1,1.0,1,0\n")
    assert main(["estimate", "--data", str(path), "--out", str(tmp_path / "r.json")]) == EXIT_DATA
    assert "line 3" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}" / "metrics.csv"
        code = main(["simulate", "--scenario", "TT", "--reps", "3", "--n", "300", "--seed", "5",
                     "--methods", "ipw,dr", "--out", str(out)])
        assert code == EXIT_OK
        est, report = sidecar_paths(out)
        assert est.exists() and report.exists()
        outs.append((out.read_bytes(), est.read_bytes()))
    assert outs[0] == outs[1]
    header = outs[0][0].decode().splitlines()[0]
    assert header == "scenario,method,parameter,bias,mc_sd,mean_se,coverage,n_fail"
    rep = json.loads(sidecar_paths(tmp_path / "run0" / "metrics.csv")[1].read_text())
    assert rep["config"]["seed"] == 5 and rep["version"] == __version__


def test_simulate_rejects_unknown_scenario(tmp_path):
    assert main(["simulate", "--scenario", "ZZ", "--out", str(tmp_path / "m.csv")]) == EXIT_CONFIG


def test_identify_binary(tmp_path, fixtures):
    out = tmp_path / "id.json"
    assert main(["identify", "--config", str(fixtures / "identify_binary.json"), "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert abs(rep["D"][0] - 0.8) < 1e-10
    np.testing.assert_allclose(rep["pi1"], rep["generating"]["pi1"], atol=1e-9)


def test_identify_mar(tmp_path, fixtures):
    out = tmp_path / "id.json"
    assert main(["identify", "--config", str(fixtures / "identify_mar.json"), "--out", str(out)]) == EXIT_OK
    assert np.ptp(json.loads(out.read_text())["pi1"]) < 1e-9


def test_identify_infeasible(tmp_path, fixtures):
    out = tmp_path / "id.json"
    code = main(["identify", "--config", str(fixtures / "identify_infeasible.json"), "--out", str(out)])
    assert code == EXIT_SOLVER
    rep = json.loads(out.read_text())
    assert rep["status"].startswith("infeasible")
    cells = rep["margins"][0]["cells_failing_for_every_d"]
    assert cells and cells[0]["margin"] < 0


def test_identify_bad_config(tmp_path):
    path = _csv(tmp_path, json.dumps({"toy": "ternary"}), "c.json")
    assert main(["identify", "--config", str(path), "--out", str(tmp_path / "i.json")]) == EXIT_CONFIG


def test_collapse_calls_into_two_stages():
    r1, r2 = collapse_calls(np.array([1, 2, 3, 5, 0]), early_calls=2)
    np.testing.assert_array_equal(r1, [1, 1, 0, 0, 0])
    np.testing.assert_array_equal(r2, [1, 1, 1, 1, 0])
    with pytest.raises(ValueError):
        collapse_calls(np.array([1, -1]), early_calls=2)
    with pytest.raises(ValueError):
        collapse_calls(np.array([1, 2]), early_calls=0)
