from __future__ import annotations

import json
import math
import os
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from rbess.cli import CLI_SCHEMA, main
from rbess.ocv import default_ocv_table
from rbess.profiles import LoadProfile, write_profile
from rbess.scenario import bundled_scenario, load_scenario
from rbess.simulation import TRAJECTORY_HEADER

GOLDEN = Path(__file__).parent / "golden"
# set to rewrite the golden summaries after an intentional model change
REGEN = os.environ.get("RBESS_REGEN_GOLDEN") == "1"


@pytest.fixture
def cli():
    return CliRunner()


def _invoke(cli, *args):
    return cli.invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_validate_topology_ok(cli):
    res = _invoke(cli, "validate-topology", "n=3;001,001")
    assert res.exit_code == 0
    assert res.output.strip() == "ok, series"


@pytest.mark.parametrize("text, shape", [
    ("n=4;110,001,110", "2P2S"),
    ("n=3;110,110", "parallel"),
    ("n=4;001,100,001", "series, bypassed 2"),
    ("n=1;", "single cell"),
])
def test_validate_topology_shapes(cli, text, shape):
    assert _invoke(cli, "validate-topology", text).output.strip() == f"ok, {shape}"


def test_validate_topology_rejects(cli):
    res = _invoke(cli, "validate-topology", "n=3;111,001")
    assert res.exit_code != 0
    assert "triplet 1" in res.stderr


def test_json_errors(cli):
    res = _invoke(cli, "--json-errors", "validate-topology", "n=3;001")
    assert res.exit_code != 0
    payload = json.loads(res.stderr)
    assert payload["schema"] == CLI_SCHEMA
    assert payload["error"] == "TopologyError"


def test_json_errors_carry_line(cli, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("version: 1\ncells:\n  count: 2\n  bogus: 3\nprofile: {kind: constant, p_out_w: 1, duration_s: 2}\n")
    res = _invoke(cli, "--json-errors", "simulate", bad, "--out", tmp_path)
    assert res.exit_code != 0
    payload = json.loads(res.stderr)
    assert payload["error"] == "ScenarioError"
    assert payload["line"] == 4


def test_plan_reconfig_hand_example(cli):
    res = _invoke(cli, "plan-reconfig", "--vt", 12, "--vcmax", 4.2, "--pout", 50, "--icmax", 5, "--cells", 5)
    assert res.exit_code == 0
    assert res.output.startswith("n_s=3 n_p=1")


def test_plan_reconfig_infeasible(cli):
    res = _invoke(cli, "plan-reconfig", "--vt", 48, "--vcmax", 4.2, "--pout", 50, "--icmax", 5, "--cells", 5)
    assert res.exit_code != 0


def test_fit_ocv_json(cli, tmp_path):
    table = tmp_path / "ocv.csv"
    soc, volts = default_ocv_table()
    table.write_text("# soc,volts\n" + "".join(f"{float(a)!r},{float(b)!r}\n" for a, b in zip(soc, volts)))
    res = _invoke(cli, "fit-ocv", table, "-k", 3, "--json")
    assert res.exit_code == 0
    payload = json.loads(res.stdout)
    segs = payload["segments"]
    assert len(segs) == 3
    assert segs[0]["q_lo"] == 0.0 and segs[-1]["q_hi"] == 1.0
    assert payload["max_abs_error_v"] < 0.1


def test_fit_ocv_csv(cli, tmp_path):
    table = tmp_path / "ocv.csv"
    q = np.linspace(0, 1, 21)
    table.write_text("".join(f"{float(a)!r},{3.0 + 1.2 * float(a)!r}\n" for a in q))
    res = _invoke(cli, "fit-ocv", table, "-k", 1)
    lines = res.stdout.strip().splitlines()
    assert lines[0] == "q_lo,q_hi,alpha,beta"
    _, _, alpha, beta = map(float, lines[1].split(","))
    assert alpha == pytest.approx(3.0, abs=1e-9) and beta == pytest.approx(1.2, abs=1e-9)


def test_fit_ocv_unreadable_table(cli, tmp_path):
    table = tmp_path / "ocv.csv"
    table.write_text("soc,volts\nlow,high\n")
    res = _invoke(cli, "fit-ocv", table)
    assert res.exit_code != 0
    assert res.stderr.startswith("error:")


def test_optimize_step_prints_plan(cli, tmp_path):
    snap = tmp_path / "snap.csv"
    snap.write_text("# cell,q,temp_k\n1,0.87,293.85\n2,0.89,293.85\n3,0.82,293.85\n4,0.91,293.85\n5,0.93,293.85\n")
    conic = tmp_path / "step.conic.txt"
    res = _invoke(cli, "optimize-step", "experiment", "--snapshot", snap, "--dump-conic", conic)
    assert res.exit_code == 0, res.stderr
    rows = [r.split(",") for r in res.stdout.strip().splitlines()]
    header = rows[0]
    assert "p_b_w" in header
    k_col, c_col, p_col = header.index("k"), header.index("cell"), header.index("p_b_w")
    first = {int(r[c_col]): float(r[p_col]) for r in rows[1:] if int(r[k_col]) == 0}
    assert set(first) == {1, 2, 3, 4, 5}
    assert first[3] == pytest.approx(0.0, abs=1e-3)
    assert conic.read_text()


def test_optimize_step_bad_snapshot(cli, tmp_path):
    snap = tmp_path / "snap.csv"
    snap.write_text("1,0.5,300\n")
    res = _invoke(cli, "optimize-step", "experiment", "--snapshot", snap)
    assert res.exit_code != 0
    assert "cells 1..5" in res.stderr


def test_simulate_writes_outputs(cli, tmp_path):
    res = _invoke(cli, "simulate", "experiment", "--out", tmp_path)
    assert res.exit_code == 0, res.stderr
    traj = (tmp_path / "experiment_trajectory.csv").read_text().splitlines()
    assert traj[0] == ",".join(TRAJECTORY_HEADER)
    assert len(traj) == 1 + 25 * 5
    log = (tmp_path / "experiment_topology.log").read_text().splitlines()
    assert all(len(line.split(",", 2)) == 3 for line in log)
    summary = json.loads((tmp_path / "experiment_summary.json").read_text())
    assert summary["schema"] == "rbess.summary/1"
    assert summary["seed"] == 0


def test_compare_baseline(cli):
    res = _invoke(cli, "compare-baseline", "experiment")
    assert res.exit_code == 0
    vals = dict(line.split() for line in res.stdout.strip().splitlines())
    assert float(vals["delta_j"]) == pytest.approx(
        float(vals["baseline_loss_j"]) - float(vals["rbess_loss_j"]), abs=1e-5)


def _profile_scenario(tmp_path, spacing):
    prof = LoadProfile(spacing, np.full(int(120 / spacing), 5.0))
    write_profile(prof, tmp_path / "load.csv")
    text = bundled_scenario("experiment").read_text()
    text = text.replace("  kind: constant\n  p_out_w: 50.0\n  duration_s: 1500.0\n",
                        "  kind: file\n  path: load.csv\n")
    text = text.replace("faults:\n  - {time_s: 900.0, cell: 3}\n", "faults: []\n")
    path = tmp_path / "file_profile.yaml"
    path.write_text(text)
    return path


def test_profile_spacing_mismatch_needs_explicit_resample(cli, tmp_path):
    path = _profile_scenario(tmp_path, 30.0)
    res = _invoke(cli, "simulate", path, "--out", tmp_path)
    assert res.exit_code != 0
    assert "resample" in res.stderr
    res = _invoke(cli, "simulate", path, "--out", tmp_path, "--resample")
    assert res.exit_code == 0, res.stderr
    sc = load_scenario(path, resample_profile=True)
    assert sc.profile.dt == 60.0 and len(sc.profile) == 2


def test_unknown_bundled_scenario(cli, tmp_path):
    res = _invoke(cli, "simulate", "nonesuch", "--out", tmp_path)
    assert res.exit_code != 0


# --- golden summaries --------------------------------------------------------

def _assert_close(got, want, path="$"):
    if isinstance(want, dict):
        assert set(got) == set(want), f"{path}: keys {sorted(set(got) ^ set(want))}"
        for k in want:
            _assert_close(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        assert len(got) == len(want), path
        for i, (a, b) in enumerate(zip(got, want)):
            _assert_close(a, b, f"{path}[{i}]")
    elif isinstance(want, float) and not isinstance(want, bool):
        assert isinstance(got, (int, float)), path
        # solver output agrees to its own tolerance, not bit for bit, across platforms
        assert math.isclose(got, want, rel_tol=1e-5, abs_tol=1e-6), f"{path}: {got} != {want}"
    else:
        assert got == want, f"{path}: {got!r} != {want!r}"


@pytest.mark.parametrize("scenario, stem", [
    ("experiment", "experiment"),
    (str(GOLDEN / "table2_head_scenario.yaml"), "table2_head"),
])
def test_summary_golden(cli, tmp_path, scenario, stem):
    res = _invoke(cli, "simulate", scenario, "--out", tmp_path)
    assert res.exit_code == 0, res.stderr
    got = json.loads((tmp_path / f"{stem}_summary.json").read_text())
    golden = GOLDEN / f"{stem}_summary.json"
    if REGEN:
        golden.write_text(json.dumps(got, indent=2, sort_keys=True) + "\n")
    _assert_close(got, json.loads(golden.read_text()))
