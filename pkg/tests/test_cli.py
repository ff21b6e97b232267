import csv
import json
import math

import numpy as np
import pytest

from branchbsde.cli import EXIT_CONFIG, EXIT_USAGE, main


def write_config(path, **data):
    path.write_text(json.dumps(data))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


SMALL = dict(problem="paper-example", steps=2, dx=0.2, n_y=5, n_z=5, sample_cap=3000, bounds_gate="warn")


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "none.json"), "--out", str(tmp_path)]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_bad_configs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["solve", "--config", str(bad)]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "c.json", problem="nope")
    assert main(["solve", "--config", cfg]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "d.json", problem="paper-example", steps=20)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_bounds_gate_message(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", problem="paper-example", n_y=5, n_z=5)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "h < h_circ" in capsys.readouterr().err


def test_solve_artifacts_and_manifest_round_trip(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    for name in ("solution.csv", "gradient.csv", "picard.csv", "diagnostics.csv", "manifest.json"):
        assert (tmp_path / "a" / name).is_file()
    rows = read_csv(tmp_path / "a" / "solution.csv")
    assert list(rows[0]) == ["x1", "u_est", "u_exact", "abs_err"]
    assert float(rows[0]["x1"]) == pytest.approx(-1.0) and float(rows[-1]["x1"]) == pytest.approx(1.0)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 0 and man["steps"] == 2 and man["backend_used"]
    assert main(["solve", "--config", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b"), "--threads", "3"]) == 0
    for name in ("solution.csv", "gradient.csv", "picard.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_changes_estimates(tmp_path):
    cfg = write_config(tmp_path / "c.json", **dict(SMALL, problem="zero-driver"))
    main(["solve", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["solve", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "5"])
    assert (tmp_path / "a" / "solution.csv").read_bytes() != (tmp_path / "b" / "solution.csv").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 5


def test_no_facelift_and_gradient_flags(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "a"), "--no-facelift", "--gradient", "malliavin"]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["facelift"] is False and man["gradient_mode"] == "malliavin"


def test_bounds_report(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", problem="paper-example", n_y=5, n_z=5)
    assert main(["bounds", "--config", cfg]) == 0
    out = dict(line.split(" = ") for line in capsys.readouterr().out.strip().splitlines())
    for key in ("h_circ", "M_h_circ", "C1_hat", "C2_hat", "h_prime", "M_h_prime"):
        assert math.isfinite(float(out[key]))
    assert float(out["h_prime"]) < 1.0


def test_fit_driver(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", problem="paper-example", n_y=20, n_z=20)
    assert main(["fit-driver", "--config", cfg, "--out", str(tmp_path / "f")]) == 0
    data = json.loads((tmp_path / "f" / "driver.json").read_text())
    assert len(data["coeffs"]) == 400
    assert "max_fit_error" in capsys.readouterr().out


def test_sweep_nh(tmp_path):
    cfg = write_config(tmp_path / "c.json", **dict(SMALL, sweep={"axis": "nh", "values": [1, 2]}))
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    rows = read_csv(tmp_path / "s" / "sweep.csv")
    assert [r["nh"] for r in rows] == ["1", "2"]
    assert all(float(r["max_error"]) >= 0 for r in rows)


def test_sweep_records_failures(tmp_path):
    data = dict(SMALL, bounds_gate="error", sweep={"axis": "nh", "values": [2]})
    cfg = write_config(tmp_path / "c.json", **data)
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    row = read_csv(tmp_path / "s" / "sweep.csv")[0]
    assert "h_circ" in row["error"]


def test_zero_driver_matches_oracle(tmp_path):
    data = dict(problem="zero-driver", steps=2, dx=0.2, sample_cap=20_000, oracle_paths=50_000)
    cfg = write_config(tmp_path / "c.json", **data)
    assert main(["solve", "--config", cfg, "--out", str(tmp_path / "s")]) == 0
    assert main(["oracle", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    sol = read_csv(tmp_path / "s" / "solution.csv")
    orc = read_csv(tmp_path / "o" / "oracle.csv")
    diag = read_csv(tmp_path / "s" / "diagnostics.csv")
    per_t = {}
    for r in diag:
        se = float(r["theta"]) / math.sqrt(int(r["n_used"]))
        per_t[r["t"]] = max(per_t.get(r["t"], 0.0), se)
    chain = sum(s * s for s in per_t.values())
    assert len(sol) == len(orc) == 11
    for s, o in zip(sol, orc):
        assert float(s["x1"]) == pytest.approx(float(o["x1"]))
        tol = 3 * math.sqrt(float(o["se"]) ** 2 + chain)
        assert abs(float(s["u_est"]) - float(o["mean"])) < tol
