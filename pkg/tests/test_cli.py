import json
import math

import numpy as np
import pytest

from dln.cli import main, rate_column, random_schedule


def read_csv(path):
    lines = path.read_text().splitlines()
    meta = [l for l in lines if l.startswith("#")]
    body = [l for l in lines if not l.startswith("#")]
    header = body[0].split(",")
    rows = [dict(zip(header, l.split(","))) for l in body[1:]]
    return meta, header, rows


def test_rate_column_formula():
    rates = rate_column([4.0, 1.0, 0.25])
    assert math.isnan(rates[0])
    assert rates[1] == pytest.approx(2.0)
    assert rates[2] == pytest.approx(2.0)


def test_random_schedule_ratios_and_span():
    rng = np.random.default_rng(0)
    steps = random_schedule(3.0, 0.05, rng)
    assert steps.sum() == pytest.approx(3.0)
    ratios = steps[1:] / steps[:-1]
    assert ratios.min() >= 0.5 - 1e-12 and ratios.max() <= 2.0 + 1e-12


def test_coeffs_table(tmp_path):
    rc = main(["coeffs", "--out", str(tmp_path), "--theta", "1.0,0.66666666667",
               "--eps", "0,0.4", "--no-plot"])
    assert rc == 0
    meta, header, rows = read_csv(tmp_path / "coeffs.csv")
    assert any(l.startswith("# config:") for l in meta)
    assert any(l.startswith("# sha256:") for l in meta)
    for row in rows:
        assert float(row["sum_beta"]) == pytest.approx(1.0, abs=1e-13)
        assert float(row["sum_alpha"]) == pytest.approx(0.0, abs=1e-13)
        if float(row["theta"]) == 1.0:
            for g in ("gamma0", "gamma1", "gamma2"):
                assert float(row[g]) == 0.0
    twothirds = [r for r in rows if abs(float(r["theta"]) - 2 / 3) < 1e-6
                 and float(r["eps"]) == 0.0][0]
    assert float(twothirds["beta0"]) == pytest.approx(2 / 9, abs=1e-9)
    assert float(twothirds["beta1"]) == pytest.approx(2 / 9, abs=1e-9)
    assert float(twothirds["beta2"]) == pytest.approx(5 / 9, abs=1e-9)


def test_ivp_converge_and_determinism(tmp_path):
    args = ["ivp-converge", "--out", str(tmp_path), "--levels", "3",
            "--theta", "0.66666666667", "--schedule", "both", "--seed", "5"]
    assert main(args) == 0
    first = (tmp_path / "ivp_converge.csv").read_text()
    assert (tmp_path / "ivp_converge.svg").stat().st_size > 0
    assert main(args) == 0
    second = (tmp_path / "ivp_converge.csv").read_text()

    def strip_wall(text):
        out = []
        for line in text.splitlines():
            if line.startswith("#"):
                out.append(line)
            else:
                out.append(",".join(line.split(",")[:-1]))  # wall_time is last
        return "\n".join(out)

    assert strip_wall(first) == strip_wall(second)
    # the hash is computed over the deterministic columns, so it also agrees
    h1 = [l for l in first.splitlines() if l.startswith("# sha256:")]
    h2 = [l for l in second.splitlines() if l.startswith("# sha256:")]
    assert h1 == h2


def test_nse_converge_small(tmp_path):
    rc = main(["nse-converge", "--out", str(tmp_path), "--grid", "16",
               "--theta", "1.0", "--k-list", "0.05,0.025", "--no-plot"])
    assert rc == 0
    meta, header, rows = read_csv(tmp_path / "nse_converge.csv")
    assert header[:3] == ["theta", "k", "err_u_inf0"]
    assert len(rows) == 2
    assert float(rows[1]["rate_u_inf0"]) == pytest.approx(2.0, abs=0.2)


def test_nse_adapt_small(tmp_path):
    rc = main(["nse-adapt", "--out", str(tmp_path), "--grid", "16",
               "--theta", "0.66666666667", "--t-end", "0.2", "--k0", "0.002",
               "--kmin", "0.002", "--kmax", "0.05", "--algorithm", "both"])
    assert rc == 0
    led = tmp_path / "nse_adapt_lte_theta0p6667.csv"
    assert led.exists()
    meta, header, rows = read_csv(led)
    assert header[:8] == ["attempt_index", "t_n", "k_n", "accepted", "estimator",
                          "E_ND", "E_VD", "energy"]
    assert (tmp_path / "nse_adapt_lte_theta0p6667.svg").stat().st_size > 0
    assert (tmp_path / "nse_adapt_summary.csv").exists()


def test_nse_adapt_midpoint_nd_rides_kmax(tmp_path):
    rc = main(["nse-adapt", "--out", str(tmp_path), "--grid", "16",
               "--theta", "1.0", "--t-end", "0.5", "--k0", "0.005",
               "--kmin", "0.005", "--kmax", "0.04", "--algorithm", "nd", "--no-plot"])
    assert rc == 0
    meta, header, rows = read_csv(tmp_path / "nse_adapt_nd_theta1p0000.csv")
    assert all(float(r["estimator"]) == 0.0 for r in rows)
    assert max(float(r["k_n"]) for r in rows) == pytest.approx(0.04)


def test_config_file_with_flag_override(tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"theta": [1.0], "eps": [0.0, 0.25], "out": "ignored"}))
    rc = main(["coeffs", "--config", str(cfg), "--out", str(tmp_path), "--no-plot"])
    assert rc == 0
    meta, header, rows = read_csv(tmp_path / "coeffs.csv")
    assert {float(r["eps"]) for r in rows} == {0.0, 0.25}   # from the file
    assert all(float(r["theta"]) == 1.0 for r in rows)
    # the config echo records the merged configuration
    cfg_line = [l for l in meta if l.startswith("# config:")][0]
    echoed = json.loads(cfg_line.split(": ", 1)[1])
    assert echoed["out"] == str(tmp_path)                   # flag beat the file
