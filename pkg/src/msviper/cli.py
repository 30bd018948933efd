"""Command-line pipeline: train-expert, distill, eval, repair, report, coverage.

Every command reads one YAML document, validates it completely before writing anything,
and writes its artifacts plus a ``manifest.json`` into a fresh output directory. Paths
inside configs are resolved against the config file's directory and recorded as given,
so manifests carry neither absolute paths nor timestamps.

Exit codes: 0 success, 2 configuration or input error, 3 domain error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import __version__
from .core import DEFAULT_VIBRATION_REMAP, ROTATE_LEFT, ROTATE_RIGHT, STOP, load_tree, save_tree, tree_stats
from .distill import DistillConfig, evaluate, expert_states, fidelity, msviper, ssviper
from .envs import ScenarioSpec, layout_for
from .errors import ConfigError, DomainError, InputError
from .expert import QParams, SCRIPTED_KINDS, load_expert, save_expert, scripted_expert, train_q_expert
from .metrics import (CoverageParams, OscillationDetector, behavior_report, coverage_probability,
                      efficiency)
from .treemod import (RepairLog, VibrationSpaceSpec, detect_freezing, detect_oscillation,
                      detect_vibration_m1, detect_vibration_m2, fix_freezing, fix_oscillation,
                      fix_vibration_m1, fix_vibration_m2)

DEFECTS = ("freezing", "oscillation", "vibration1", "vibration2")
EXIT_OK, EXIT_INPUT, EXIT_DOMAIN = 0, 2, 3


# ---------------------------------------------------------------------------
# Config and artifact helpers
# ---------------------------------------------------------------------------


def read_config(path, allowed: Sequence[str], required: Sequence[str] = ()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config {path} not found")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"missing config keys {missing}")
    return doc


def _build(cls, d, what: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{what} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"bad {what}: {exc}") from None


def parse_scenarios(items) -> list[ScenarioSpec]:
    if not isinstance(items, list) or not items:
        raise ConfigError("scenarios must be a non-empty list")
    out = []
    for d in items:
        if not isinstance(d, dict):
            raise ConfigError("each scenario must be a mapping")
        try:
            out.append(ScenarioSpec.from_dict(d))
        except TypeError as exc:
            raise ConfigError(f"bad scenario: {exc}") from None
    return out


def resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def fresh_dir(path) -> Path:
    path = Path(path)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise ConfigError(f"output directory {path} is not empty")
    return path


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs: dict, outputs: Sequence[str],
                   extra: dict | None = None) -> Path:
    doc = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": inputs,
        "outputs": {name: file_digest(out / name) for name in outputs},
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(dump_json(doc))
    return path


def _load_expert_checked(path: Path, scenarios: Sequence[ScenarioSpec]):
    expert, layout = load_expert(path)
    for s in scenarios:
        if layout_for(s) != layout:
            raise ConfigError(f"expert layout does not match scenario stage {s.stage}")
    return expert


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_expert(args) -> int:
    cfg = read_config(args.config, ("kind", "params", "q", "scenarios", "seed"), ("kind", "scenarios"))
    scenarios = parse_scenarios(cfg["scenarios"])
    kind = cfg["kind"]
    seed = int(cfg.get("seed", 0))
    if kind == "tabular":
        if cfg.get("params"):
            raise ConfigError("tabular experts take their settings under 'q'")
        q = _build(QParams, {**cfg.get("q", {}), "seed": seed}, "q")
        out = fresh_dir(args.out)
        expert = train_q_expert(scenarios, q)
    elif kind in SCRIPTED_KINDS:
        if cfg.get("q"):
            raise ConfigError("scripted experts do not take 'q' settings")
        expert = scripted_expert(kind, layout_for(scenarios[0]), **dict(cfg.get("params") or {}))
        out = fresh_dir(args.out)
    else:
        raise ConfigError(f"unknown expert kind {kind!r}")
    save_expert(expert, out, layout_for(scenarios[0]), seed)
    outputs = ["expert.json"] + (["qtable.csv"] if expert.qtable is not None else [])
    write_manifest(out, "train-expert", cfg, {}, outputs)
    print(f"expert ({kind}) written to {out}")
    return EXIT_OK


def _run_distill(expert, scenarios, dcfg: DistillConfig, mode: str):
    if mode == "msviper":
        return msviper(expert, scenarios, dcfg)
    return ssviper(expert, scenarios[-1], dcfg, stages=len(scenarios))


def _sweep_point(expert_path: str, scenarios, dcfg_dict: dict, mode: str) -> dict:
    expert, _ = load_expert(expert_path)
    dcfg = DistillConfig.from_dict(dcfg_dict)
    run = _run_distill(expert, scenarios, dcfg, mode)
    return {"n_s": dcfg.n_s, **tree_stats(run.tree), "mean_return": run.candidates[run.selected].score["mean_return"]}


def cmd_distill(args) -> int:
    base = Path(args.config).parent
    cfg = read_config(args.config, ("expert", "scenarios", "distill", "sweep_n_s"), ("expert", "scenarios"))
    scenarios = parse_scenarios(cfg["scenarios"])
    dcfg = DistillConfig.from_dict(dict(cfg.get("distill") or {}))
    sweep = [int(n) for n in cfg.get("sweep_n_s") or []]
    if any(n < 1 for n in sweep):
        raise ConfigError("sweep_n_s entries must be >= 1")
    expert_path = resolve(base, cfg["expert"])
    expert = _load_expert_checked(expert_path, scenarios)
    out = fresh_dir(args.out)

    run = _run_distill(expert, scenarios, dcfg, args.mode)
    out.mkdir(parents=True, exist_ok=True)
    save_tree(run.tree, out / "tree.json")
    (out / "run.json").write_text(dump_json(run.manifest("tree.json")))
    outputs = ["tree.json", "run.json"]
    if sweep:
        points = [DistillConfig.from_dict({**dcfg.to_dict(), "n_s": n}).to_dict() for n in sweep]
        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                rows = list(pool.map(_sweep_point, [str(expert_path)] * len(points), [scenarios] * len(points),
                                     points, [args.mode] * len(points)))
        else:
            rows = [_sweep_point(str(expert_path), scenarios, p, args.mode) for p in points]
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["mode", "n_s", "node_count", "leaf_count", "depth", "mean_return"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"mode": args.mode, **r, "mean_return": format(r["mean_return"], ".10g")})
        (out / "sizes.csv").write_text(buf.getvalue())
        outputs.append("sizes.csv")
    write_manifest(out, "distill", {**cfg, "mode": args.mode, "distill": dcfg.to_dict()},
                   {"expert": str(cfg["expert"])}, outputs)
    stats = tree_stats(run.tree)
    print(f"{args.mode}: selected candidate {run.selected} with {stats['node_count']} nodes -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = read_config(args.config, ("scenario", "trials", "seed", "fidelity_states"), ("scenario",))
    scenario = parse_scenarios([cfg["scenario"]])[0]
    trials, seed = int(cfg.get("trials", 50)), int(cfg.get("seed", 0))
    n_states = int(cfg.get("fidelity_states", 0))
    if trials < 1 or n_states < 0:
        raise ConfigError("trials must be >= 1 and fidelity_states >= 0")
    policies = {}
    if args.tree:
        tree = load_tree(args.tree)
        if tree.layout != layout_for(scenario):
            raise ConfigError("tree layout does not match the scenario")
        policies["tree"] = tree
    if args.expert:
        policies["expert"] = _load_expert_checked(Path(args.expert), [scenario])
    if not policies:
        raise ConfigError("eval needs --tree and/or --expert")
    out = fresh_dir(args.out)

    doc = {}
    for name, pol in policies.items():
        doc[name] = {**behavior_report(pol, scenario, trials, seed).to_dict(),
                     **{f"eval_{k}": v for k, v in evaluate(pol, [scenario], trials, seed).items()}}
    if len(policies) == 2:
        er, tr = doc["expert"]["eval_mean_return"], doc["tree"]["eval_mean_return"]
        doc["reward_ratio"] = tr / er if er else None
        if n_states:
            states = expert_states(policies["expert"], scenario, n_states, seed)
            doc["fidelity"] = fidelity(policies["tree"], policies["expert"], states)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(dump_json(doc))
    write_manifest(out, "eval", cfg, {"tree": args.tree, "expert": args.expert}, ["eval.json"])
    if "fidelity" in doc:
        print(f"fidelity ratio {doc['fidelity']:.4f} (action agreement on {n_states} expert states)")
    if "reward_ratio" in doc and doc["reward_ratio"] is not None:
        print(f"reward ratio tree/expert {doc['reward_ratio']:.4f}")
    return EXIT_OK


REPAIR_KEYS = ("a_F", "m_A", "a_R", "a_L", "occupancy_threshold", "L", "min_alternations", "n_e", "seed", "z",
               "h", "V_b", "gamma", "M_c", "scenario")


def _repair(tree, defect: str, p: dict):
    if defect == "freezing":
        det = detect_freezing(tree, tuple(p.get("a_F", (STOP,))), int(p.get("m_A", 0)))
        return fix_freezing(tree, det, int(p.get("a_R", ROTATE_RIGHT)), int(p.get("a_L", ROTATE_LEFT)),
                            float(p.get("occupancy_threshold", 0.0)))
    if defect == "oscillation":
        if "scenario" not in p:
            raise ConfigError("oscillation repair needs a scenario to observe the tree in")
        scenario = parse_scenarios([p["scenario"]])[0]
        detector = OscillationDetector(int(p.get("L", 6)), int(p.get("min_alternations", 4)))
        obs = detect_oscillation(tree, scenario, detector, int(p.get("n_e", 10)), int(p.get("seed", 0)))
        new, log = fix_oscillation(tree, obs, bool(p.get("z", False)))
        log.notes.append(f"observations {json.dumps(obs.summary(), sort_keys=True)}")
        return new, log
    if defect == "vibration1":
        if "h" not in p:
            raise ConfigError("vibration1 needs h")
        return fix_vibration_m1(tree, detect_vibration_m1(tree), float(p["h"]))
    if "V_b" not in p:
        raise ConfigError("vibration2 needs V_b")
    spec = VibrationSpaceSpec(float(p["V_b"]), float(p.get("gamma", 0.9)))
    M_c = {int(k): int(v) for k, v in (p.get("M_c") or DEFAULT_VIBRATION_REMAP).items()}
    return fix_vibration_m2(tree, detect_vibration_m2(tree, spec), M_c)


def cmd_repair(args) -> int:
    if args.defect not in DEFECTS:
        raise ConfigError(f"unknown defect {args.defect!r}; expected one of {DEFECTS}")
    p = read_config(args.config, REPAIR_KEYS) if args.config else {}
    for name in ("h", "V_b", "m_A", "n_e", "seed"):
        v = getattr(args, name, None)
        if v is not None:
            p[name] = v
    tree = load_tree(args.tree)
    out = fresh_dir(args.out)
    new, log = _repair(tree, args.defect, p)
    out.mkdir(parents=True, exist_ok=True)
    save_tree(new, out / "tree.json")
    log.save(out / "repair_log.json")
    write_manifest(out, "repair", {"defect": args.defect, **p}, {"tree": args.tree},
                   ["tree.json", "repair_log.json"])
    print(f"{args.defect}: detected {len(log.detected)} nodes, N_plus = {log.N_plus} -> {out}")
    return EXIT_OK


METRICS = {"freezing": "freezing_rate", "oscillation": "c_osc_pct", "vibration1": "v_b_mean",
           "vibration2": "v_b_mean"}


def cmd_report(args) -> int:
    cfg = read_config(args.config, ("scenario", "trials", "seed", "metric")) if args.config else {}
    log = RepairLog.load(args.log) if Path(args.log).is_file() else None
    if log is None:
        raise ConfigError(f"repair log {args.log} not found")
    metric = cfg.get("metric", METRICS.get(log.defect))
    doc = {"repair_log": args.log, "defect": log.defect, "metric": metric}
    if args.M1 is not None or args.M2 is not None:
        if args.M1 is None or args.M2 is None:
            raise ConfigError("--M1 and --M2 go together")
        M_1, M_2 = args.M1, args.M2
    else:
        if not (args.before and args.after and "scenario" in cfg):
            raise ConfigError("report needs --before, --after and a config with a scenario (or --M1/--M2)")
        scenario = parse_scenarios([cfg["scenario"]])[0]
        trials, seed = int(cfg.get("trials", 50)), int(cfg.get("seed", 0))
        before, after = load_tree(args.before), load_tree(args.after)
        rb, ra = behavior_report(before, scenario, trials, seed), behavior_report(after, scenario, trials, seed)
        if metric not in rb.to_dict():
            raise ConfigError(f"unknown metric {metric!r}")
        doc["before"], doc["after"] = rb.to_dict(), ra.to_dict()
        M_1, M_2 = getattr(rb, metric), getattr(ra, metric)
    eff = efficiency(M_1, M_2, log)
    doc["efficiency"] = eff.to_dict()
    rows = [("M_1", M_1), ("M_2", M_2), ("N_1", eff.N_1), ("N_plus", eff.N_plus), ("e_O", eff.e_O), ("e_R", eff.e_R)]
    if args.sizes:
        doc["sizes"] = list(csv.DictReader(io.StringIO(Path(args.sizes).read_text())))
    out = fresh_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(dump_json(doc))
    (out / "efficiency.csv").write_text("field,value\n" + "".join(f"{k},{v:.10g}\n" for k, v in rows))
    write_manifest(out, "report", cfg, {"log": args.log, "before": args.before, "after": args.after,
                                         "sizes": args.sizes}, ["report.json", "efficiency.csv"])
    print(f"{metric}: {M_1:.4g} -> {M_2:.4g}; e_O = {eff.e_O:.4g}, e_R = {eff.e_R:.4g}")
    return EXIT_OK


def cmd_coverage(args) -> int:
    cfg = read_config(args.config, ("p", "m", "epsilon"), ("p", "m", "epsilon"))
    try:
        params = CoverageParams(np.asarray(cfg["p"], dtype=float), int(cfg["m"]), float(cfg["epsilon"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        raise ConfigError(f"bad coverage parameters: {exc}") from None
    doc = {"K": params.K, "n_E": params.n_E, "m": params.m, "epsilon": params.epsilon,
           "P_V": coverage_probability(params, "viper"), "P_M": coverage_probability(params, "msviper")}
    out = fresh_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "coverage.json").write_text(dump_json(doc))
    write_manifest(out, "coverage", cfg, {}, ["coverage.json"])
    print(f"P_V = {doc['P_V']:.6g}, P_M = {doc['P_M']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msviper", description="Distil navigation experts into decision trees and repair them")
    ap.add_argument("--jobs", type=int, default=1, help="cap on concurrent worker processes")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-expert", help="train or instantiate an expert policy")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_expert)

    p = sub.add_parser("distill", help="distil an expert into a tree")
    p.add_argument("config")
    p.add_argument("--mode", choices=("msviper", "ssviper"), default="msviper")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="behaviour report for a tree and/or an expert")
    p.add_argument("config")
    p.add_argument("--tree")
    p.add_argument("--expert")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("repair", help="detect and fix a defect in a tree")
    p.add_argument("tree")
    p.add_argument("--defect", required=True)
    p.add_argument("--config")
    p.add_argument("--h", type=float)
    p.add_argument("--V-b", dest="V_b", type=float)
    p.add_argument("--m-A", dest="m_A", type=int)
    p.add_argument("--n-e", dest="n_e", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_repair)

    p = sub.add_parser("report", help="before/after comparison with modification efficiency")
    p.add_argument("--log", required=True)
    p.add_argument("--before")
    p.add_argument("--after")
    p.add_argument("--config")
    p.add_argument("--M1", type=float)
    p.add_argument("--M2", type=float)
    p.add_argument("--sizes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("coverage", help="critical-state coverage probabilities")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_coverage)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.jobs < 1:
        ap.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DomainError as exc:
        print(f"domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
