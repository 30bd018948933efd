import json
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from conftest import random_tree
from msviper.cli import main
from msviper.core import DEFAULT_VIBRATION_REMAP, STOP, TreeNode, load_tree, save_tree
from msviper.envs import layout_for, terrain_scenario
from msviper.metrics import CoverageParams, coverage_probability

GRID = [{"env_kind": "grid", "stage": 0, "size": 5, "n_static": 1, "horizon": 30, "placement": "fixed_goal"},
        {"env_kind": "grid", "stage": 1, "size": 5, "n_static": 2, "horizon": 30, "placement": "fixed_goal"}]
FREEZE = {"env_kind": "unicycle", "size": 6, "n_static": 1, "placement": "blocking", "horizon": 60}
OSC = {"env_kind": "unicycle", "size": 8, "horizon": 60}
SMALL_DISTILL = {"M": 3, "N": 2, "l_t": 30, "n_s": 300, "n_cv": 3}

CONFIGS = {
    "exp_grid.yaml": {"kind": "tabular", "q": {"episodes": 200}, "scenarios": GRID, "seed": 1},
    "dist_grid.yaml": {"expert": "e_grid", "scenarios": GRID, "distill": SMALL_DISTILL, "sweep_n_s": [100, 200]},
    "dist_one.yaml": {"expert": "e_grid", "scenarios": GRID[1:], "distill": SMALL_DISTILL},
    "eval_grid.yaml": {"scenario": GRID[1], "trials": 5, "fidelity_states": 200},
    "exp_frz.yaml": {"kind": "freezing_flawed", "scenarios": [FREEZE]},
    "dist_frz.yaml": {"expert": "e_frz", "scenarios": [FREEZE],
                      "distill": {"M": 5, "N": 2, "l_t": 60, "n_cv": 3, "beta_schedule": "expert"}},
    "exp_osc.yaml": {"kind": "oscillating_flawed", "scenarios": [OSC]},
    "dist_osc.yaml": {"expert": "e_osc", "scenarios": [OSC], "distill": {"M": 5, "N": 2, "l_t": 60, "n_cv": 3}},
    "rep_frz.yaml": {"m_A": 2},
    "rep_osc.yaml": {"scenario": OSC, "n_e": 5},
    "rep_vib.yaml": {"V_b": 1.0},
    "report_frz.yaml": {"scenario": FREEZE, "trials": 10},
    "cov.yaml": {"p": [[0.1, 0.2], [0.3, 0.05]], "m": 10, "epsilon": 0.5},
}


def run(*argv):
    return main([str(a) for a in argv])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    for name, doc in CONFIGS.items():
        (root / name).write_text(yaml.safe_dump(doc))
    terrain = layout_for(terrain_scenario())
    rng = np.random.default_rng(0)
    save_tree(random_tree(rng, 12, terrain, features=terrain.group("angular_velocity"),
                          actions=sorted(DEFAULT_VIBRATION_REMAP)), root / "terrain_tree.json")
    assert run("train-expert", root / "exp_grid.yaml", "--out", root / "e_grid") == 0
    assert run("distill", root / "dist_grid.yaml", "--out", root / "d_grid") == 0
    assert run("train-expert", root / "exp_frz.yaml", "--out", root / "e_frz") == 0
    assert run("distill", root / "dist_frz.yaml", "--out", root / "d_frz") == 0
    assert run("repair", root / "d_frz/tree.json", "--defect", "freezing", "--config", root / "rep_frz.yaml",
               "--out", root / "r_frz") == 0
    return root


COMMANDS = {
    "train-expert": lambda w, o: run("train-expert", w / "exp_grid.yaml", "--out", o),
    "distill": lambda w, o: run("distill", w / "dist_grid.yaml", "--out", o),
    "eval": lambda w, o: run("eval", w / "eval_grid.yaml", "--tree", w / "d_grid/tree.json",
                             "--expert", w / "e_grid", "--out", o),
    "repair-freezing": lambda w, o: run("repair", w / "d_frz/tree.json", "--defect", "freezing",
                                        "--config", w / "rep_frz.yaml", "--out", o),
    "repair-vibration2": lambda w, o: run("repair", w / "terrain_tree.json", "--defect", "vibration2",
                                          "--config", w / "rep_vib.yaml", "--out", o),
    "report": lambda w, o: run("report", "--log", w / "r_frz/repair_log.json", "--before", w / "d_frz/tree.json",
                               "--after", w / "r_frz/tree.json", "--config", w / "report_frz.yaml",
                               "--sizes", w / "d_grid/sizes.csv", "--out", o),
    "coverage": lambda w, o: run("coverage", w / "cov.yaml", "--out", o),
}


@pytest.mark.parametrize("command", sorted(COMMANDS))
def test_repeat_runs_are_byte_identical(ws, command, tmp_path):
    assert COMMANDS[command](ws, tmp_path / "a") == 0
    assert COMMANDS[command](ws, tmp_path / "b") == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_oscillation_repair_is_deterministic(ws, tmp_path):
    assert run("train-expert", ws / "exp_osc.yaml", "--out", tmp_path / "e_osc") == 0
    shutil.copy(ws / "dist_osc.yaml", tmp_path)
    assert run("distill", tmp_path / "dist_osc.yaml", "--out", tmp_path / "d") == 0
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        assert run("repair", tmp_path / "d/tree.json", "--defect", "oscillation",
                   "--config", ws / "rep_osc.yaml", "--out", out) == 0
        outs.append(files(out))
    assert outs[0] == outs[1]


def test_manifest_records_output_digests(ws):
    man = json.loads((ws / "d_grid/manifest.json").read_text())
    assert set(man["outputs"]) == {"tree.json", "run.json", "sizes.csv"}
    assert man["command"] == "distill" and "time" not in json.dumps(man)


def test_sweep_table(ws):
    lines = (ws / "d_grid/sizes.csv").read_text().splitlines()
    assert lines[0] == "mode,n_s,node_count,leaf_count,depth,mean_return"
    assert [l.split(",")[1] for l in lines[1:]] == ["100", "200"]


def test_parallel_sweep_matches_serial(ws, tmp_path):
    assert run("--jobs", 2, "distill", ws / "dist_grid.yaml", "--out", tmp_path / "p") == 0
    assert files(tmp_path / "p") == files(ws / "d_grid")


def test_single_scenario_modes_agree(ws, tmp_path):
    assert run("distill", ws / "dist_one.yaml", "--mode", "msviper", "--out", tmp_path / "m") == 0
    assert run("distill", ws / "dist_one.yaml", "--mode", "ssviper", "--out", tmp_path / "s") == 0
    assert (tmp_path / "m/tree.json").read_bytes() == (tmp_path / "s/tree.json").read_bytes()


def test_eval_reports_fidelity(ws, tmp_path, capsys):
    assert COMMANDS["eval"](ws, tmp_path / "ev") == 0
    assert "fidelity ratio" in capsys.readouterr().out
    doc = json.loads((tmp_path / "ev/eval.json").read_text())
    assert 0 <= doc["fidelity"] <= 1 and set(doc) >= {"tree", "expert", "reward_ratio"}


def test_zero_shift_leaves_tree_unchanged(ws, tmp_path):
    assert run("repair", ws / "terrain_tree.json", "--defect", "vibration1", "--h", 0,
               "--out", tmp_path / "r") == 0
    assert (tmp_path / "r/tree.json").read_bytes() == (ws / "terrain_tree.json").read_bytes()
    assert json.loads((tmp_path / "r/repair_log.json").read_text())["N_plus"] == 0


def test_vibration2_changes_follow_remap(ws, tmp_path):
    assert COMMANDS["repair-vibration2"](ws, tmp_path / "r") == 0
    log = json.loads((tmp_path / "r/repair_log.json").read_text())
    assert log["N_plus"] > 0
    for c in log["changes"]:
        assert c["after"] == DEFAULT_VIBRATION_REMAP[c["before"]] != c["before"]


def test_freezing_repair_on_stop_free_tree(ws, tmp_path):
    tree = load_tree(ws / "d_frz/tree.json")
    nodes = {i: TreeNode.leaf(i, 2) if n.is_leaf and n.action == STOP else n for i, n in tree.nodes.items()}
    save_tree(tree.replace(nodes), tmp_path / "t.json")
    assert run("repair", tmp_path / "t.json", "--defect", "freezing", "--m-A", 15, "--out", tmp_path / "r") == 0
    assert json.loads((tmp_path / "r/repair_log.json").read_text())["N_plus"] == 0


def test_report_efficiency_identity(ws, tmp_path):
    assert COMMANDS["report"](ws, tmp_path / "rep") == 0
    eff = json.loads((tmp_path / "rep/report.json").read_text())["efficiency"]
    gain = abs(eff["M_2"] - eff["M_1"]) / eff["M_1"]
    assert eff["e_O"] * eff["N_plus"] == pytest.approx(gain)
    assert eff["e_R"] * eff["N_plus"] / eff["N_1"] == pytest.approx(gain)


def test_coverage_matches_library(ws, tmp_path):
    assert COMMANDS["coverage"](ws, tmp_path / "c") == 0
    doc = json.loads((tmp_path / "c/coverage.json").read_text())
    params = CoverageParams(np.array(CONFIGS["cov.yaml"]["p"]), 10, 0.5)
    assert doc["P_M"] == coverage_probability(params, "msviper")
    assert doc["P_V"] == coverage_probability(params, "viper")


# --- failures ---------------------------------------------------------------------------


def test_unknown_config_key_writes_nothing(tmp_path):
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump({**CONFIGS["cov.yaml"], "delta": 1}))
    assert run("coverage", tmp_path / "bad.yaml", "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_malformed_yaml(tmp_path):
    (tmp_path / "bad.yaml").write_text("p: [[0.1, 0.2\n")
    assert run("coverage", tmp_path / "bad.yaml", "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_missing_expert(tmp_path):
    (tmp_path / "d.yaml").write_text(yaml.safe_dump({**CONFIGS["dist_grid.yaml"], "expert": "nowhere"}))
    assert run("distill", tmp_path / "d.yaml", "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o").exists()


def test_missing_tree(tmp_path):
    assert run("repair", tmp_path / "none.json", "--defect", "freezing", "--out", tmp_path / "o") == 2


def test_unknown_defect(ws, tmp_path):
    assert run("repair", ws / "d_frz/tree.json", "--defect", "wobble", "--out", tmp_path / "o") == 2


def test_non_empty_output_dir(ws, tmp_path):
    (tmp_path / "o").mkdir()
    (tmp_path / "o/keep.txt").write_text("x")
    assert COMMANDS["coverage"](ws, tmp_path / "o") == 2
    assert [p.name for p in (tmp_path / "o").iterdir()] == ["keep.txt"]


def test_zero_baseline_metric_is_domain_error(ws, tmp_path):
    assert run("report", "--log", ws / "r_frz/repair_log.json", "--M1", 0, "--M2", 0.5,
               "--out", tmp_path / "o") == 3
    assert not (tmp_path / "o").exists()


def test_indivisible_coverage_budget(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({**CONFIGS["cov.yaml"], "m": 5}))
    assert run("coverage", tmp_path / "c.yaml", "--out", tmp_path / "o") in (2, 3)


def test_console_script(tmp_path):
    (tmp_path / "cov.yaml").write_text(yaml.safe_dump(CONFIGS["cov.yaml"]))
    exe = shutil.which("msviper")
    cmd = [exe] if exe else [sys.executable, "-m", "msviper.cli"]
    out = subprocess.run(cmd + ["coverage", str(tmp_path / "cov.yaml"), "--out", str(tmp_path / "o")],
                         capture_output=True, text=True)
    assert out.returncode == 0 and "P_M" in out.stdout
