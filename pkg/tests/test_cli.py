import csv

import numpy as np
import pytest
import yaml

from galamm.cli import EXIT_INPUT, EXIT_OK, fmt, main, parse_grid


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tables(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*.csv"))}


@pytest.fixture(scope="module")
def ses_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--design", "ses-like", "--subjects", "60", "--seed", "3", "--out", str(d), "--quiet"]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def fitted(tmp_path_factory, ses_dir):
    d = tmp_path_factory.mktemp("fit")
    code = main(["fit", "--data", str(ses_dir / "data.csv"), "--model", str(ses_dir / "model.yaml"), "--out", str(d), "--quiet"])
    assert code == EXIT_OK
    return d


def test_fmt_and_grid():
    assert fmt(0.1) == "0.1" and fmt(True) == "true" and fmt(float("nan")) == "nan" and fmt(float("-inf")) == "-inf"
    np.testing.assert_allclose(parse_grid("3", 0, 1), [0, 0.5, 1])
    np.testing.assert_allclose(parse_grid("1:2:3", 0, 1), [1, 1.5, 2])
    np.testing.assert_allclose(parse_grid("0.2,0.4", 0, 1), [0.2, 0.4])


def test_simulate_outputs(ses_dir):
    for name in ("data.csv", "truth.csv", "model.yaml", "model_null.yaml", "manifest.yaml"):
        assert (ses_dir / name).exists()
    man = yaml.safe_load((ses_dir / "manifest.yaml").read_text())
    assert man["status"] == "ok" and man["exit_code"] == 0


def test_fit_outputs(fitted):
    summary = {r["quantity"]: r["value"] for r in read_csv(fitted / "fit_summary.csv")}
    assert summary["converged"] == "true"
    params = read_csv(fitted / "parameters.csv")
    assert any(r["parameter"] == "lambda8" for r in params)
    vc = read_csv(fitted / "variance_components.csv")
    assert any(r["component"] == "smoothing_parameter" for r in vc)


def test_bands_and_offsets(tmp_path, fitted):
    out = tmp_path / "b"
    assert main(["bands", "--fit", str(fitted), "--smooth", "f_age", "--grid", "12", "--nsim", "500", "--out", str(out), "--quiet"]) == 0
    rows = read_csv(out / "bands.csv")
    assert len(rows) == 12
    for r in rows:
        assert float(r["lo_sim"]) <= float(r["lo_pt"]) <= float(r["fhat"]) <= float(r["hi_pt"]) <= float(r["hi_sim"])
    out2 = tmp_path / "o"
    code = main(
        ["bands", "--fit", str(fitted), "--smooth", "f_age", "--latent", "ses", "--item", "hippo", "--offsets", "-2,0,2", "--grid", "5", "--nsim", "200", "--out", str(out2), "--quiet"]
    )
    assert code == 0
    head = read_csv(out2 / "trajectories.csv")[0]
    assert "fhat[-2.0]" in head and "fhat[2.0]" in head


def test_compare(tmp_path, ses_dir, fitted):
    null = tmp_path / "null"
    assert main(["fit", "--data", str(ses_dir / "data.csv"), "--model", str(ses_dir / "model_null.yaml"), "--out", str(null), "--quiet"]) == 0
    out = tmp_path / "cmp"
    assert main(["compare", "--fits", str(fitted), str(null), "--names", "alt,null", "--out", str(out), "--quiet"]) == 0
    lr = read_csv(out / "lrt.csv")
    assert lr[0]["df"] == "1" and float(lr[0]["statistic"]) >= 0
    assert {r["model"] for r in read_csv(out / "aic.csv")} == {"alt", "null"}


def test_input_errors_exit_1(tmp_path, ses_dir):
    out = tmp_path / "e"
    bad = tmp_path / "bad.csv"
    bad.write_text((ses_dir / "data.csv").read_text().replace("hippo,", "nosuch,", 1))
    assert main(["fit", "--data", str(bad), "--model", str(ses_dir / "model.yaml"), "--out", str(out), "--quiet"]) == EXIT_INPUT
    man = yaml.safe_load((out / "manifest.yaml").read_text())
    assert man["status"] == "error" and "row 2: unknown dispersion group" in man["error"]
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--out", str(out)])
    assert exc.value.code == EXIT_INPUT
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--out", str(out)])
    assert exc.value.code == EXIT_INPUT


def test_unknown_smooth_exit_1(tmp_path, fitted):
    assert main(["bands", "--fit", str(fitted), "--smooth", "nope", "--out", str(tmp_path / "x"), "--quiet"]) == EXIT_INPUT


def test_bootstrap_deterministic_across_threads(tmp_path, fitted):
    outs = []
    for k, th in enumerate(("1", "2")):
        d = tmp_path / f"bs{k}"
        args = ["bootstrap", "--fit", str(fitted), "--replicates", "3", "--seed", "5", "--threads", th, "--no-se", "--out", str(d), "--quiet"]
        assert main(args) == 0
        outs.append(tables(d))
    assert outs[0] == outs[1]
