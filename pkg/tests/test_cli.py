import json
import os

import numpy as np
import pytest

from istc_planner.cli import (EXIT_GUIDANCE, EXIT_IO, EXIT_ISTC, EXIT_OK, EXIT_VALIDATION, main)
from istc_planner.scenario import (ObstacleBox, OccupancyGrid, PlannerConfig, Scenario,
                                   VehicleSpec, serialize_scenario)


def _two_lanes():
    vehicles = [VehicleSpec(1, 4.0, 2.0, 2.7, (0.0, 0.0, 0.0), (15.0, 0.0, 0.0), priority=0.5),
                VehicleSpec(2, 4.0, 2.0, 2.7, (15.0, 8.0, np.pi), (0.0, 8.0, np.pi),
                            priority=0.2)]
    paths = {1: [(x, 0.0, 0.0) for x in np.linspace(0, 15, 31)],
             2: [(x, 8.0, np.pi) for x in np.linspace(15, 0, 31)]}
    grid = OccupancyGrid((-10.0, -6.0), 0.5, 70, 40)
    return Scenario(vehicles, [], grid, PlannerConfig(), paths, name="two-lanes")


@pytest.fixture
def scenario_file(tmp_path):
    p = tmp_path / "two_lanes.json"
    p.write_text(serialize_scenario(_two_lanes()))
    return str(p)


def test_full_run(scenario_file, tmp_path):
    out = tmp_path / "out"
    assert main(["--scenario", scenario_file, "--out", str(out)]) == EXIT_OK
    names = set(os.listdir(out))
    expected = {"guidance_1.csv", "guidance_2.csv", "corridors.txt", "trajectory_1.csv",
                "trajectory_2.csv", "plot_xy.svg", "plot_va.svg", "plot_corridor_1.svg",
                "plot_corridor_2.svg", "report.txt", "summary.json"}
    assert expected <= names
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and summary["violations"] == []
    assert len(summary["vehicles"]) == 2
    assert "result: PASS" in (out / "report.txt").read_text()
    assert (out / "guidance_1.csv").read_text().startswith("k,t,x_ref,y_ref,theta_ref\n")


def test_layer1_only(scenario_file, tmp_path):
    out = tmp_path / "out"
    assert main(["--scenario", scenario_file, "--out", str(out), "--layer1-only"]) == EXIT_OK
    names = set(os.listdir(out))
    assert "corridors.txt" in names
    assert not any(n.startswith("trajectory_") for n in names)
    doc = json.loads((out / "corridors.txt").read_text())
    assert [c["vehicle"] for c in doc["corridors"]] == [1, 2]


def test_deterministic_outputs_repeat(scenario_file, tmp_path):
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["--scenario", scenario_file, "--out", str(out), "--deterministic",
                     "--node-budget", "200"]) == EXIT_OK
        runs.append({n: (out / n).read_bytes() for n in sorted(os.listdir(out))})
    assert runs[0] == runs[1]
    assert b"time" not in runs[0]["summary.json"]


def test_head_on_fails_in_istc_stage(tmp_path, capsys):
    assert main(["--scenario", "head_on", "--out", str(tmp_path / "o")]) == EXIT_ISTC
    assert "error [istc]" in capsys.readouterr().err
    # outputs from earlier stages are kept
    assert os.path.exists(tmp_path / "o" / "guidance_1.csv")


def test_missing_file(tmp_path, capsys):
    code = main(["--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == EXIT_IO
    assert "error [io]" in capsys.readouterr().err


def test_bad_json(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["--scenario", str(p), "--out", str(tmp_path / "o")]) == EXIT_VALIDATION
    assert "error [validation]" in capsys.readouterr().err


def test_invalid_override(scenario_file, tmp_path, capsys):
    code = main(["--scenario", scenario_file, "--out", str(tmp_path / "o"), "--dt", "0.3"])
    assert code == EXIT_VALIDATION
    assert "integer multiple of dt" in capsys.readouterr().err


def test_unreachable_goal_fails_in_guidance(tmp_path, capsys):
    s = _two_lanes()
    s.guidance = {}
    wall = ObstacleBox(1, 7.0, 8.0, -6.0, 14.0)
    s.obstacles = [wall]
    s.grid.rasterize([wall])
    p = tmp_path / "walled.json"
    p.write_text(serialize_scenario(s))
    code = main(["--scenario", str(p), "--out", str(tmp_path / "o")])
    assert code == EXIT_GUIDANCE
    assert "error [guidance]" in capsys.readouterr().err


def test_unwritable_output(scenario_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["--scenario", scenario_file, "--out", str(blocker / "sub")]) == EXIT_IO
