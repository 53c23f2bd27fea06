"""Command-line interface: bound computation, simulation, validation.

Subcommands
    bound       peak-output bounds for the scenario's linear system
    simulate    one closed-loop run, trace written as ND-JSON or CSV
    montecarlo  sampled-peak validation of the bounds
    validate    parse and check a scenario file

Exit codes: 0 success (goal reached for simulate), 2 invalid scenario or
solver failure, 3 horizon reached without the goal, 4 safety violation
(collision, chain breach, or Monte Carlo bound exceedance).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path as FilePath

import numpy as np

from .bounds import (
    BoundMethod,
    RelaxedLinearSystem,
    build_relaxed_system,
    peak_bound_lyap,
    peak_bound_sdp,
)
from .errors import GovnavError, PoseInObstacle, ScenarioError
from .linearization import AckermannParams, brunovsky_realization, gains_from_poles
from .numkit import SymMatrix
from .sim import (
    DisturbanceKind,
    DisturbanceModel,
    Scenario,
    monte_carlo_peak,
    run_closed_loop,
)
from .world import GroundTruthMap, LidarSpec

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_HORIZON = 3
EXIT_UNSAFE = 4


def _parse_pole(p) -> complex:
    if isinstance(p, str):
        return complex(p.replace(" ", ""))
    if isinstance(p, (list, tuple)) and len(p) == 2:
        return complex(float(p[0]), float(p[1]))
    return complex(float(p))


def _parse_poles(spec) -> tuple:
    return tuple(tuple(_parse_pole(p) for p in chain) for chain in spec)


def _parse_s(spec, dim: int = 2) -> SymMatrix:
    if isinstance(spec, (int, float)):
        return SymMatrix(float(spec) * np.eye(dim))
    return SymMatrix(np.asarray(spec, dtype=float))


def _set_nested(data: dict, dotted: str, raw: str) -> None:
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_scenario_file(path, overrides=()) -> dict:
    path = FilePath(path)
    with open(path) as fh:
        data = json.load(fh)
    for item in overrides:
        if "=" not in item:
            raise ScenarioError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set_nested(data, key, raw)
    data["_base_dir"] = str(path.parent)
    return data


def _load_map(data: dict) -> GroundTruthMap:
    ref = data.get("map")
    if ref is None:
        raise ScenarioError("scenario has no map")
    if isinstance(ref, dict):
        return GroundTruthMap.from_dict(ref)
    return GroundTruthMap.load(FilePath(data["_base_dir"]) / ref)


def scenario_from_dict(data: dict) -> Scenario:
    """Build the typed simulation scenario; raises ScenarioError on bad input."""
    try:
        lidar_cfg = data.get("lidar", {})
        dist_cfg = data.get("disturbance", {})
        scn = Scenario(
            gt_map=_load_map(data),
            ackermann=AckermannParams(
                wheelbase_m=float(data.get("wheelbase_m", 1.0)),
                beta=float(data.get("beta", 10.0)),
                v_min_mps=float(data.get("v_min_mps", 0.01)),
                max_steer_rad=float(data.get("max_steer_rad", 1.35)),
            ),
            initial_state=np.asarray(data["initial_state"], dtype=float),
            goal=np.asarray(data["goal_m"], dtype=float),
            chain_poles=_parse_poles(data["poles"]),
            k_g=float(data.get("k_g", 1.0)),
            delta_w=float(data["delta_w"]),
            s_out=_parse_s(data.get("s_out", 1.0)),
            eps_e=float(data.get("eps_e", 0.05)),
            bound_method=BoundMethod(data.get("bound_method", "lyap")),
            lidar=LidarSpec(
                num_beams=int(lidar_cfg.get("num_beams", 360)),
                max_range_m=float(lidar_cfg.get("max_range_m", 30.0)),
            ),
            dt_s=float(data.get("dt_s", 0.001)),
            control_period_s=float(data.get("control_period_s", 0.02)),
            replan_period_s=float(data.get("replan_period_s", 0.5)),
            horizon_s=float(data.get("horizon_s", 60.0)),
            seed=int(data.get("seed", 0)),
            disturbance_kind=DisturbanceKind(dist_cfg.get("kind", "extremal")),
            disturbance_hold_s=float(dist_cfg.get("hold_s", 0.1)),
            grid_resolution_m=float(data.get("grid_resolution_m", 0.25)),
            inflation_radius_m=(None if data.get("inflation_radius_m") is None
                                else float(data["inflation_radius_m"])),
            robot_radius_m=float(data.get("robot_radius_m", 0.0)),
            governor_start=(None if data.get("governor_start_m") is None
                            else np.asarray(data["governor_start_m"], dtype=float)),
            terminate_on_goal=bool(data.get("terminate_on_goal", True)),
            log_sdp_bound=bool(data.get("log_sdp_bound", False)),
            name=str(data.get("name", "scenario")),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc}") from exc
    scn.validate()
    return scn


def linear_system_from_dict(data: dict):
    """The (system, z0) pair driving the bound and montecarlo subcommands.

    Uses the explicit `system` section when present, otherwise derives the
    closed loop (and the governor-relative initial state) from the
    simulation scenario.
    """
    section = data.get("system")
    if section is not None:
        try:
            rho = [int(r) for r in section["rho"]]
            real = brunovsky_realization(rho)
            gains = gains_from_poles(real, _parse_poles(section["poles"]))
            gamma = float(section.get("gamma", max(1.0, float(section.get("beta", 1.0)))))
            delta_w = float(section["delta_w"])
            s_out = _parse_s(section.get("s_out", 1.0), dim=real.input_dim)
            sys_ = build_relaxed_system(real, gains, gamma, delta_w, s_out)
            z0 = np.asarray(section.get("z0", np.zeros(real.state_dim)), dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"invalid system section: {exc}") from exc
        if z0.shape != (real.state_dim,):
            raise ScenarioError("z0 dimension does not match the system")
        return sys_, z0

    scn = scenario_from_dict(data)
    plant, real, gains, sys_ = scn.build_system()
    x0 = scn.initial_state
    g0 = plant.output(x0) if scn.governor_start is None else scn.governor_start
    z0 = real.t @ plant.coordinate_map(x0) - sys_.c_bar.T @ g0
    return sys_, z0


def _emit(report: dict, out: str | None) -> None:
    text = json.dumps(report, indent=2)
    if out:
        FilePath(out).write_text(text + "\n")
    print(text)


def _methods(arg: str):
    if arg == "both":
        return (BoundMethod.SDP, BoundMethod.LYAP)
    return (BoundMethod(arg),)


def cmd_bound(args) -> int:
    data = load_scenario_file(args.scenario, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    sys_, z0 = linear_system_from_dict(data)
    report = {"alpha_bar": sys_.alpha_bar, "z0": z0.tolist()}
    for method in _methods(args.method):
        fn = peak_bound_sdp if method is BoundMethod.SDP else peak_bound_lyap
        start = time.perf_counter()
        bound = fn(sys_, z0)
        report[f"delta_{method.value}"] = bound.delta
        report[f"alpha_star_{method.value}"] = bound.alpha_star
        report[f"wall_time_s_{method.value}"] = time.perf_counter() - start
    _emit(report, args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    data = load_scenario_file(args.scenario, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    scn = scenario_from_dict(data)
    try:
        trace = run_closed_loop(scn)
    except PoseInObstacle as exc:
        print(f"collision: {exc}", file=sys.stderr)
        return EXIT_UNSAFE
    if args.out:
        out = FilePath(args.out)
        if out.suffix == ".csv":
            trace.to_csv(out)
        else:
            trace.to_ndjson(out)
    violations = trace.chain_violations()
    summary = {
        "status": trace.status,
        "steps": trace.meta["steps"],
        "t_end": trace.meta["t_end"],
        "chain_violations": violations,
        "delta_ultimate": trace.meta["delta_ultimate"],
        "goal_eps": trace.meta["goal_eps"],
        "final_y": trace.meta["final_y"],
    }
    print(json.dumps(summary, indent=2))
    if violations:
        first = next(r for r in trace.rows
                     if r["governor_moved"] and (
                         r["dist_sq_g_y"] > r["bound"] + 1e-6
                         or r["bound"] + r["eps_e"] > r["dist_sq_g_obs"] + 1e-6))
        print(f"first violating record: {json.dumps(first)}", file=sys.stderr)
        return EXIT_UNSAFE
    if trace.status == "horizon":
        return EXIT_HORIZON
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    data = load_scenario_file(args.scenario, args.set or [])
    if args.seed is not None:
        data["seed"] = args.seed
    mc = data.get("montecarlo", {})
    sys_, z0 = linear_system_from_dict(data)
    trials = int(args.trials or mc.get("trials", 1000))
    horizon = float(mc.get("horizon_s", 15.0))
    model = DisturbanceModel(
        kind=DisturbanceKind(mc.get("kind", "extremal")),
        hold_s=float(mc.get("hold_s", 0.05)),
        delta_w=1.0,  # the relaxed system takes unit-norm disturbance
        seed=int(data.get("seed", 0)),
    )
    # test hook: scales the certified bounds before the comparison so the
    # oracle's sensitivity itself can be exercised
    bound_scale = float(mc.get("bound_scale", 1.0))

    peaks = monte_carlo_peak(sys_, z0, trials, horizon, model, per_trial=True)
    report = {"trials": trials, "seed": int(data.get("seed", 0)),
              "sampled_peak": float(np.max(peaks)), "horizon_s": horizon}
    violations = 0
    for method in _methods(args.method):
        fn = peak_bound_sdp if method is BoundMethod.SDP else peak_bound_lyap
        delta = fn(sys_, z0).delta
        report[f"delta_{method.value}"] = delta
        violations = max(violations,
                         int(np.sum(peaks > bound_scale * delta + 1e-6)))
    report["violations"] = violations
    if bound_scale != 1.0:
        report["bound_scale"] = bound_scale
    _emit(report, args.out)
    return EXIT_UNSAFE if violations else EXIT_OK


def cmd_validate(args) -> int:
    data = load_scenario_file(args.scenario, args.set or [])
    checked = []
    if "system" in data or "map" not in data:
        linear_system_from_dict(data)
        checked.append("system")
    if "map" in data:
        scenario_from_dict(data)
        checked.append("simulation")
    print(json.dumps({"scenario": str(args.scenario), "valid": True,
                      "sections": checked}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="govnav",
        description="invariant-ellipsoid output bounds and governor navigation",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("bound", cmd_bound), ("simulate", cmd_simulate),
                     ("montecarlo", cmd_montecarlo), ("validate", cmd_validate)):
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="write the report/trace here")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario field (dotted keys, JSON values)")
        p.add_argument("--method", choices=["sdp", "lyap", "both"], default="both")
        p.add_argument("--trials", type=int, default=None)
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except GovnavError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
