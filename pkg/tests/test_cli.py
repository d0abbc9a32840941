import hashlib
import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from seqsdid.cli import main
from seqsdid.panel import read_panel_csv

SPEC = """\
n_units = 400
T = 12
r = 2
signal = 0.5
n_groups = 40
assignment = independent
start = 6
end = 10
never_share = 0.4
"""


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def err_of(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    (d / "design.txt").write_text(SPEC)
    assert main(["simulate", "--design-spec", str(d / "design.txt"), "--output-dir", str(d / "out"),
                 "--seed", "3", "--scheme", "grouped", "--k-max", "2"]) == 0
    return d


def test_simulate_outputs(sim_dir):
    out = sim_dir / "out"
    assert {p.name for p in out.iterdir()} == {"panel.csv", "truths.csv", "factors.csv", "run.json"}
    panel = pd.read_csv(out / "panel.csv")
    assert len(panel) == 400 * 12
    assert json.loads((out / "run.json").read_text())["seed"] == 3


def test_estimate_writes_outputs_and_is_deterministic(sim_dir, tmp_path):
    panel = sim_dir / "out" / "panel.csv"
    before = sha(panel)
    args = ["estimate", "--input", str(panel), "--k-max", "2", "--bootstrap", "20", "--seed", "1"]
    assert main(args + ["--output-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "b")]) == 0
    for name in ("estimates.csv", "horizon.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    run = json.loads((tmp_path / "a" / "run.json").read_text())
    assert run["estimator"]["kind"] == "SSDID"
    assert run["input"]["sha256"] == before
    hz = pd.read_csv(tmp_path / "a" / "horizon.csv")
    assert list(hz.columns) == ["k", "tau_k", "se", "ci_lo", "ci_hi"] and len(hz) == 3
    assert (hz["se"] > 0).all()
    assert sha(panel) == before


def test_estimate_inf_is_plain_did(sim_dir, tmp_path):
    assert main(["estimate", "--input", str(sim_dir / "out" / "panel.csv"), "--eta", "inf",
                 "--output-dir", str(tmp_path)]) == 0
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["estimator"]["kind"] == "SEQ_DID"
    assert run["estimator"]["eta_used"] == "inf"


def test_missing_input_exits_one(tmp_path, capsys):
    assert main(["estimate", "--input", str(tmp_path / "nope.csv"), "--output-dir", str(tmp_path)]) == 1
    assert err_of(capsys)["error"] == "io.not_found"


def test_bad_flag_exits_two(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--input", "x.csv", "--output-dir", str(tmp_path), "--eta", "-3"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--bogus"])
    assert exc.value.code == 2


def test_bootstrap_requires_seed(sim_dir, tmp_path, capsys):
    assert main(["estimate", "--input", str(sim_dir / "out" / "panel.csv"), "--bootstrap", "5",
                 "--output-dir", str(tmp_path)]) == 1
    assert err_of(capsys)["error"] == "config.invalid"


def test_placebo(sim_dir, tmp_path):
    assert main(["placebo", "--input", str(sim_dir / "out" / "panel.csv"), "--placebo-p", "2",
                 "--bootstrap", "20", "--seed", "4", "--output-dir", str(tmp_path)]) == 0
    pl = pd.read_csv(tmp_path / "placebo.csv")
    assert list(pl["horizon"]) == [0, 1]
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["placebo"]["P"] == 2 and isinstance(run["placebo"]["passed"], bool)


def test_placebo_shift_out_of_range(sim_dir, tmp_path, capsys):
    assert main(["placebo", "--input", str(sim_dir / "out" / "panel.csv"), "--placebo-p", "9",
                 "--bootstrap", "5", "--seed", "4", "--output-dir", str(tmp_path)]) == 1
    assert err_of(capsys)["error"] == "panel.shift_out_of_range"


def test_montecarlo(sim_dir, tmp_path):
    assert main(["montecarlo", "--design-spec", str(sim_dir / "design.txt"), "--reps", "2",
                 "--bootstrap", "5", "--seed", "0", "--k-max", "1", "--oracle", "--scheme", "grouped",
                 "--output-dir", str(tmp_path)]) == 0
    rmse = pd.read_csv(tmp_path / "rmse.csv")
    assert set(rmse["estimator"]) == {"SSDID", "SEQ_DID", "SEQ_OLS"}
    cov = pd.read_csv(tmp_path / "coverage.csv")
    assert cov["coverage"].between(0, 1).all()
    assert len(pd.read_csv(tmp_path / "tstats.csv")) == 2 * 2 * 2


def test_oracle_check_passes(sim_dir, tmp_path):
    out = sim_dir / "out"
    assert main(["oracle-check", "--input", str(out / "panel.csv"), "--factors", str(out / "factors.csv"),
                 "--scheme", "grouped", "--output-dir", str(tmp_path)]) == 0
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["affine_hull"]["ok"] and run["max_abs_diff"] <= 1e-8
    assert len(pd.read_csv(tmp_path / "oracle_check.csv")) > 0


def test_oracle_check_degenerate_loadings(sim_dir, tmp_path, capsys):
    out = sim_dir / "out"
    f = pd.read_csv(out / "factors.csv", dtype={"index": str})
    f.loc[f["kind"] == "loading", ["f1", "f2"]] = 1.0
    f.to_csv(tmp_path / "flat.csv", index=False)
    assert main(["oracle-check", "--input", str(out / "panel.csv"), "--factors", str(tmp_path / "flat.csv"),
                 "--scheme", "grouped", "--output-dir", str(tmp_path / "o")]) == 1
    assert err_of(capsys)["error"] == "affine_hull.loadings_rank"


def test_oracle_check_without_factors(sim_dir, tmp_path):
    out = sim_dir / "out"
    f = pd.read_csv(out / "factors.csv", dtype={"index": str})[["kind", "index"]]
    f.to_csv(tmp_path / "none.csv", index=False)
    assert main(["oracle-check", "--input", str(out / "panel.csv"), "--factors", str(tmp_path / "none.csv"),
                 "--scheme", "grouped", "--output-dir", str(tmp_path / "o")]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "seqsdid.cli", "estimate", "--input",
                           str(tmp_path / "missing.csv"), "--output-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 1
    assert json.loads(proc.stderr)["error"] == "io.not_found"
    proc = subprocess.run([sys.executable, "-m", "seqsdid.cli", "nope"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_numeric_csv_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(0)
    df = pd.DataFrame({"unit": np.repeat([1, 2], 3), "period": np.tile([1, 2, 3], 2),
                       "outcome": rng.normal(size=6), "adoption": ["2"] * 3 + [""] * 3})
    path = tmp_path / "p.csv"
    df.to_csv(path, index=False, float_format="%.17g")
    np.testing.assert_array_equal(read_panel_csv(path).Y.ravel(), df["outcome"].to_numpy())
