import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from stable_homog.cli import main
from stable_homog.harness import SweepRecord, write_records_csv
from stable_homog.lattice import read_grid_binary


def _records(tmp_path, name="r.csv", h="abc"):
    recs = [SweepRecord(1.5, 2, "uniform:1", 0, k, "2", "killed", 2.0 * k**-0.5, "ok", 1.0) for k in (4, 8, 16)]
    return write_records_csv(recs, tmp_path / name, h)


def test_fit_prints_slope(tmp_path, capsys):
    path = _records(tmp_path)
    assert main(["fit", "--in", str(path), "--json", str(tmp_path / "s.json")]) == 0
    out = capsys.readouterr().out
    assert out.startswith("slope -0.5 ")
    assert json.loads((tmp_path / "s.json").read_text())["fit"]["n_points"] == 3


def test_fit_mixed_hashes_is_usage_error(tmp_path):
    a = _records(tmp_path, "a.csv", "h1")
    b = _records(tmp_path, "b.csv", "h2")
    assert main(["fit", "--in", str(a), str(b)]) == 1


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["nonsense"],
        ["fit", "--in", "/nonexistent/records.csv"],
        ["sweep", "--config", "/nonexistent/config.json"],
        ["resolve", "--alpha", "2.5", "--k", "4", "--law", "constant"],
        ["poincare", "--alpha", "1", "--rs", "4,x", "--out", "p.csv"],
        ["env", "sample", "--seed", "0", "--law", "gamma:1", "--box", "2", "--out", "x.csv"],
    ],
)
def test_usage_errors_exit_one(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_invalid_config_exits_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 2, "alpha": 1.5, "ks": [4, 8], "unknown": 3}))
    assert main(["sweep", "--config", str(cfg)]) == 1


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0


def test_env_sample(tmp_path):
    out = tmp_path / "w.csv"
    assert main(["env", "sample", "--seed", "7", "--law", "bernoulli:0.5", "--dim", "1", "--box", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 6
    assert {float(r["w"]) for r in rows} <= {0.0, 2.0}
    assert rows[0]["x"] == "-1" and rows[0]["y"] == "0"


def test_resolve_and_corrector_files(tmp_path, capsys):
    out = tmp_path / "u.bin"
    assert main(["resolve", "--alpha", "0.8", "--dim", "1", "--k", "8", "--law", "uniform:0.5", "--out", str(out)]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["l2_error"] > 0 and rec["iterations"] > 0
    u = read_grid_binary(out)
    assert u.box.k == 8 and u.values.shape == (32,)
    cout = tmp_path / "phi.bin"
    assert main(["corrector", "--alpha", "1.5", "--dim", "2", "--m", "2", "--law", "constant", "--out", str(cout)]) == 0
    phi = read_grid_binary(cout)
    assert np.max(np.abs(phi.values)) <= 1e-8


def test_sweep_and_plot_data(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 1, "alpha": 0.5, "law": "uniform:1", "seeds": [0, 1], "ks": [4, 8, 16],
                               "deterministic": True}))
    assert main(["sweep", "--config", str(cfg), "--output-dir", str(tmp_path / "o"), "--threads", "1"]) == 0
    csv_path = tmp_path / "o" / "sweep.csv"
    assert csv_path.is_file() and (tmp_path / "o" / "sweep.json").is_file()
    assert main(["fit", "--in", str(csv_path)]) == 0
    assert main(["plot-data", "--in", str(csv_path), "--out-dir", str(tmp_path / "plot")]) == 0
    assert list((tmp_path / "plot").glob("*.gp")) and list((tmp_path / "plot").glob("*.dat"))


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "stable_homog.cli", "fit", "--in", str(tmp_path / "no.csv")],
                       capture_output=True, text=True)
    assert r.returncode == 1 and "not found" in r.stderr
