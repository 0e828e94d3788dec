"""Command-line front end: ``ipstop <subcommand> [options]``.

Settings come from three layers, later ones winning: built-in defaults, a
JSON config file of flat dotted keys (``--config``), then command-line flags.
Each data file bundle carries the resolved settings; timestamps and wall-clock
times go to a ``<subcommand>.meta.json`` sidecar so the data files themselves
are byte-identical on rerun.

Exit status is 0 on success, 1 on a domain or I/O error (one JSON line on
stderr) and 2 on a usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import glob
import json
import os
import platform
import sys
import time
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from . import dists, learner, policies, report, sim, solver
from .errors import BadParameters, IPStopError, MissingInput
from .model import ObservationModel, RewardParams, TransitionModel

OUTPUT_ENV = "IPSTOP_OUTPUT_DIR"
DEFAULT_OUTPUT = "ipstop-out"


# --------------------------------------------------------------------------
# value converters (accept both flag strings and JSON values)

def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _int(v) -> int:
    if isinstance(v, bool):
        raise ValueError(f"not an integer: {v!r}")
    if isinstance(v, float):
        if not v.is_integer():
            raise ValueError(f"not an integer: {v!r}")
        return int(v)
    return int(v)


def _ints(v) -> List[int]:
    if isinstance(v, str):
        v = [p for p in v.replace(" ", "").split(",") if p]
    return [_int(x) for x in v]


def _opt_float(v) -> Optional[float]:
    if v is None or (isinstance(v, str) and v.lower() in ("none", "null", "")):
        return None
    return float(v)


def _str(v) -> str:
    if not isinstance(v, str):
        raise ValueError(f"not a string: {v!r}")
    return v


def _strs(v) -> List[str]:
    if isinstance(v, str):
        return [v]
    return [_str(x) for x in v]


def _axis(v) -> Optional[List[float]]:
    """``start:stop:step`` (stop included) or a comma list."""
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return [float(x) for x in v]
    s = str(v).strip()
    if ":" in s:
        parts = [float(p) for p in s.split(":")]
        if len(parts) == 2:
            parts.append(1.0)
        if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
            raise ValueError(f"bad range {v!r}")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [start + i * step for i in range(n)]
    return [float(p) for p in s.split(",") if p]


@dataclasses.dataclass(frozen=True)
class Opt:
    key: str
    flag: str
    conv: Callable[[Any], Any]
    default: Any
    help: str
    action: Optional[str] = None


ENV_OPTS = (
    Opt("model.name", "--model", _str, "appendix_uniform", "observation model preset or model JSON file"),
    Opt("env.p", "--p", float, 0.2, "per-step intrusion onset probability"),
    Opt("env.attacker_sequence_length", "--attack-length", _int, 22, "attacker steps until the intrusion completes"),
    Opt("env.max_steps", "--max-steps", _int, 200, "episode step cap"),
    Opt("rewards.r_stop_intrusion", "--reward-stop-intrusion", float, 100.0, "reward for stopping an intrusion"),
    Opt("rewards.r_early_stop", "--reward-early-stop", float, -100.0, "reward for stopping with no intrusion"),
    Opt("rewards.r_service", "--reward-service", float, 10.0, "per-step service reward while continuing"),
    Opt("rewards.r_intruded", "--reward-intruded", float, -100.0, "per-step cost of an ongoing intrusion"),
)

SOLVE_OPTS = ENV_OPTS[:2] + ENV_OPTS[4:] + (
    Opt("solver.belief_grid_size", "--grid", _int, 1001, "belief grid size for the threshold sweep"),
    Opt("solver.gamma", "--gamma", float, 1.0, "discount factor"),
    Opt("solver.tolerance", "--tolerance", float, 1e-9, "sup-norm convergence tolerance"),
    Opt("solver.max_iterations", "--max-iterations", _int, 500, "value iteration cap"),
)


def _trainer_opts():
    conv = {int: _int, float: float, bool: _bool, str: _str, tuple: _ints}
    out = []
    for f in dataclasses.fields(learner.TrainerConfig):
        if f.name == "seed":
            continue
        if f.name == "max_grad_norm":
            c = _opt_float
        else:
            c = conv[type(f.default)]
        default = list(f.default) if isinstance(f.default, tuple) else f.default
        action = argparse.BooleanOptionalAction if c is _bool else None
        out.append(Opt(f"trainer.{f.name}", "--" + f.name.replace("_", "-"), c, default,
                       f"trainer {f.name.replace('_', ' ')}", action))
    return tuple(out)


TRAIN_OPTS = ENV_OPTS + _trainer_opts() + (
    Opt("seeds", "--seeds", _ints, [0], "comma-separated training seeds"),
    Opt("train.checkpoint_every", "--checkpoint-every", _int, 0, "write a policy checkpoint every k iterations"),
)
RUN_OPTS = (
    Opt("episodes", "--episodes", _int, 1000, "number of episodes"),
    Opt("seed", "--seed", _int, 0, "root seed"),
)
SIMULATE_OPTS = ENV_OPTS + (Opt("policy", "--policy", _str, "fixed:6", "policy spec or policy JSON file"),) + RUN_OPTS + (
    Opt("simulate.steps", "--steps", _bool, False, "also write per-step records", argparse.BooleanOptionalAction),
)
EVALUATE_OPTS = ENV_OPTS + (
    Opt("policies", "--policy", _strs, ["fixed:6", "first-alert", "oracle"], "policy spec (repeatable)", "append"),
    Opt("episodes", "--episodes", _int, 10000, "number of episodes"),
    RUN_OPTS[1],
)
PROBE_OPTS = (
    Opt("policy", "--policy", _str, None, "policy spec or policy JSON file"),
    Opt("probe.x", "--x", _axis, None, "severe-alert axis, start:stop:step or a comma list"),
    Opt("probe.y", "--y", _axis, None, "warning-alert axis"),
    Opt("probe.z", "--z", _axis, None, "login-attempt axis"),
    Opt("probe.t", "--t", _axis, None, "time-step axis"),
    Opt("probe.b", "--b", _axis, None, "belief axis"),
    Opt("probe.deterministic", "--deterministic", _bool, False, "probe the greedy policy",
        argparse.BooleanOptionalAction),
)
INGEST_OPTS = (
    Opt("ingest.input", "--input", _str, None, "measurement CSV"),
    Opt("ingest.bounds", "--bounds", _ints, list(dists.DEFAULT_BOUNDS), "counter bounds X,Y,Z"),
    Opt("ingest.joint", "--joint", _bool, False, "estimate a joint pmf instead of per-counter pmfs",
        argparse.BooleanOptionalAction),
    Opt("ingest.smoothing", "--smoothing", _bool, False, "add-one smoothing", argparse.BooleanOptionalAction),
    Opt("ingest.max_phase", "--max-phase", lambda v: None if v is None else _int(v), None,
        "pool attacker steps beyond this phase"),
)
REPORT_OPTS = (
    Opt("report.inputs", "--inputs", _strs, None, "directory with solve/train/probe outputs (repeatable)", "append"),
    Opt("report.format", "--format", _str, "csv", "csv or json"),
)

COMMANDS: Dict[str, tuple] = {
    "solve": (SOLVE_OPTS, "solve the POMDP exactly and locate the stopping threshold"),
    "train": (TRAIN_OPTS, "train an actor-critic policy with PPO"),
    "simulate": (SIMULATE_OPTS, "simulate episodes under one policy and write traces"),
    "evaluate": (EVALUATE_OPTS, "compare policies on shared episode seeds"),
    "probe": (PROBE_OPTS, "tabulate a policy's stop probability over a grid"),
    "ingest": (INGEST_OPTS, "estimate an observation model from a measurement CSV"),
    "report": (REPORT_OPTS, "turn saved results into plot-ready tables"),
}
KNOWN_KEYS = {o.key for opts, _ in COMMANDS.values() for o in opts} | {"out"}


def _dest(key: str) -> str:
    return key.replace(".", "__")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipstop", description="Optimal stopping for intrusion prevention.")
    parser.add_argument("--version", action="version", version=f"ipstop {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    for name, (opts, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="JSON file of flat dotted keys")
        p.add_argument("--out", default=argparse.SUPPRESS,
                       help=f"output directory (default: ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
        if any(o.key == "model.name" for o in opts):
            p.add_argument("--model-param", action="append", default=argparse.SUPPRESS, metavar="NAME=VALUE",
                           help="preset parameter, value parsed as JSON when possible")
        for o in opts:
            kw = dict(dest=_dest(o.key), default=argparse.SUPPRESS, help=f"{o.help} (default: {o.default})")
            if o.action is not None:
                kw["action"] = o.action
            p.add_argument(o.flag, **kw)
    return parser


# --------------------------------------------------------------------------
# settings


def _json_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_settings(command: str, ns: argparse.Namespace) -> Dict[str, Any]:
    opts = COMMANDS[command][0]
    raw: Dict[str, Any] = {o.key: o.default for o in opts}
    model_params: Dict[str, Any] = {}
    out = os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT
    if ns.config:
        try:
            with open(ns.config, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise BadParameters(f"config {ns.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise BadParameters("config must be a JSON object of dotted keys")
        for k, v in cfg.items():
            if k.startswith("model.") and k != "model.name":
                model_params[k[len("model."):]] = v
            elif k == "out":
                out = v
            elif k not in KNOWN_KEYS:
                raise BadParameters(f"unknown config key {k!r}")
            elif k in raw:
                raw[k] = v
    given = vars(ns)
    for o in opts:
        if _dest(o.key) in given:
            raw[o.key] = given[_dest(o.key)]
    for item in given.get("model_param", []) or []:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise BadParameters(f"--model-param expects NAME=VALUE, got {item!r}")
        model_params[name] = _json_value(value)
    if "out" in given:
        out = given["out"]
    settings = {}
    for o in opts:
        v = raw[o.key]
        try:
            settings[o.key] = o.conv(v) if v is not None else None
        except (TypeError, ValueError) as exc:
            raise BadParameters(f"{o.key}: {exc}") from None
    if any(o.key == "model.name" for o in opts):
        settings["model.params"] = dict(sorted(model_params.items()))
    settings["out"] = out
    return settings


def config_echo(settings: Dict[str, Any]) -> Dict[str, Any]:
    """Resolved settings minus those that cannot change the data (output location)."""
    return {k: settings[k] for k in sorted(settings) if k != "out"}


def _env(settings) -> sim.EnvConfig:
    model = dists.resolve_model(settings["model.name"], **settings["model.params"])
    rewards = RewardParams(**{k.split(".", 1)[1]: v for k, v in settings.items() if k.startswith("rewards.")})
    return sim.EnvConfig(
        observations=model,
        transition=TransitionModel(settings["env.p"]),
        rewards=rewards,
        attacker_sequence_length=settings.get("env.attacker_sequence_length", 22),
        max_steps=settings.get("env.max_steps", 200),
    )


# --------------------------------------------------------------------------
# output helpers


def _write(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n"


def _write_meta(out: str, command: str, started: float, wall: float, extra: dict = None) -> str:
    meta = {
        "command": command,
        "started_utc": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_seconds": wall,
        "ipstop_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    meta.update(extra or {})
    return _write(os.path.join(out, f"{command}.meta.json"), _dumps(meta))


def _clean(obj):
    """NaN to None so JSON stays strict."""
    if isinstance(obj, float) and np.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


# --------------------------------------------------------------------------
# subcommands


def cmd_solve(s, out) -> dict:
    env = _env(s)
    pomdp = env.pomdp
    cfg = solver.SolverConfig(gamma=s["solver.gamma"], max_iterations=s["solver.max_iterations"],
                              tolerance=s["solver.tolerance"], belief_grid_size=s["solver.belief_grid_size"])
    V = solver.value_iteration(pomdp, cfg)
    analysis = solver.stopping_set(V, pomdp, cfg.belief_grid_size)
    doc = {
        "config": config_echo(s),
        "alpha_star": analysis.alpha_star,
        "value_at_0": float(V(0.0)),
        "value_at_1": float(V(1.0)),
        "episode_start_value": solver.episode_start_value(V, pomdp),
        "value_function": V.to_dict(),
        "threshold_analysis": analysis.to_dict(),
    }
    _write(os.path.join(out, "solution.json"), _dumps(doc))
    report.emit_report(report.ReportInputs(threshold=analysis), out)
    print(f"alpha_star={analysis.alpha_star:.6f} V(0)={doc['value_at_0']:.6g} V(1)={doc['value_at_1']:.6g} "
          f"start_value={doc['episode_start_value']:.6g} iterations={V.iterations}")
    return {}


def _curve_csv(records: Sequence[dict]) -> str:
    names = list(records[0])
    return report.table_csv({n: [r.get(n) for r in records] for n in names})


def cmd_train(s, out) -> dict:
    env = _env(s)
    fields = {k.split(".", 1)[1]: v for k, v in s.items() if k.startswith("trainer.")}
    fields["hidden"] = tuple(fields["hidden"])
    every = s["train.checkpoint_every"]
    if every < 0:
        raise BadParameters("checkpoint_every must be non-negative")
    echo = config_echo(s)
    curves, summary, seconds = {}, {}, {}
    for seed in s["seeds"]:
        cfg = learner.TrainerConfig(seed=seed, **fields)

        def on_iteration(it, params, record, seed=seed, cfg=cfg):
            print(f"seed {seed} iteration {it}/{cfg.iterations} "
                  f"reward {record['policy_mean_episodic_reward']:.3f}", flush=True)
            if every and it % every == 0:
                pol = learner.make_policy(params, env, cfg, cfg.deterministic_eval)
                doc = {**pol.to_dict(), "config": {**echo, "seed": seed}, "iteration": it}
                _write(os.path.join(out, "checkpoints", f"seed{seed}", f"iter{it:04d}.json"), _dumps(doc))

        res = learner.train(env, cfg, on_iteration)
        doc = {**res.policy.to_dict(), "config": {**echo, "seed": seed}, "iteration": cfg.iterations}
        _write(os.path.join(out, f"policy_seed{seed}.json"), _dumps(doc))
        if res.curve:
            _write(os.path.join(out, f"curve_seed{seed}.csv"), _curve_csv(res.curve))
            curves[seed] = res.curve
        summary[str(seed)] = _clean(res.curve[-1] if res.curve else {})
        seconds[str(seed)] = res.seconds
    _write(os.path.join(out, "train.json"), _dumps({"config": echo, "final": summary}))
    if curves:
        report.emit_report(report.ReportInputs(curves=curves), out)
    return {"iteration_seconds": seconds}


def cmd_simulate(s, out) -> dict:
    env = _env(s)
    policy = policies.parse_policy(s["policy"])
    traces, metrics = sim.run_batch(policy, env, s["episodes"], s["seed"])
    echo = config_echo(s)
    _write(os.path.join(out, "simulate.json"), sim.dumps_batch(traces, metrics, env, policy, echo))
    _write(os.path.join(out, "episodes.csv"), sim.episodes_csv(traces))
    if s["simulate.steps"]:
        _write(os.path.join(out, "steps.csv"), sim.steps_csv(traces))
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return {}


def cmd_evaluate(s, out) -> dict:
    env = _env(s)
    rows = []
    for spec in s["policies"]:
        policy = policies.parse_policy(spec)
        _, metrics = sim.run_batch(policy, env, s["episodes"], s["seed"])
        rows.append({"policy": spec, "describe": policy.describe(), "metrics": metrics.to_dict()})
        m = metrics.to_dict()
        print(f"{spec}: reward={m['mean_episodic_reward']:.3f} early_stop={m['early_stopping_probability']:.4f} "
              f"detection={m['detection_probability']:.4f}")
    _write(os.path.join(out, "evaluation.json"),
           _dumps({"config": config_echo(s), "env": env.to_dict(), "results": rows}))
    return {}


def cmd_probe(s, out) -> dict:
    if not s["policy"]:
        raise MissingInput("probe needs --policy")
    policy = policies.parse_policy(s["policy"])
    if isinstance(policy, policies.NeuralPolicy):
        policy.deterministic = s["probe.deterministic"]
    grid = {a: s[f"probe.{a}"] for a in "xyztb" if s[f"probe.{a}"] is not None}
    if not grid:
        if "belief" in policy.requires:
            grid = {"b": _axis("0:1:0.01")}
        else:
            grid = {"x": _axis("0:100:5"), "y": _axis("0:100:5"), "t": [10.0]}
    table = policies.probe_grid(policy, grid)
    _write(os.path.join(out, "probe.csv"), report.table_csv(report.probe_table(table)))
    _write(os.path.join(out, "probe.json"), _dumps({"config": config_echo(s), "axes": list(grid),
                                                    "policy": policy.describe(), "points": len(table["stop_probability"])}))
    return {}


def cmd_ingest(s, out) -> dict:
    if not s["ingest.input"]:
        raise MissingInput("ingest needs --input")
    bounds = tuple(s["ingest.bounds"])
    if len(bounds) != 3:
        raise BadParameters("bounds must have three entries")
    comps = dists.ingest_measurements(s["ingest.input"], bounds, joint=s["ingest.joint"],
                                      smoothing=s["ingest.smoothing"], max_phase=s["ingest.max_phase"])
    model = ObservationModel(bounds, comps, name="empirical")
    _write(os.path.join(out, "model.json"), dists.dumps_model(model))
    counts = {f"{k[0]}:{k[1]}": c.sample_count for k, c in comps.items()}
    _write(os.path.join(out, "ingest.json"), _dumps({"config": config_echo(s), "sample_counts": counts,
                                                     "model_sha256_16": model.digest()}))
    print(f"components={len(comps)} digest={model.digest()}")
    return {}


def load_results(dirs: Sequence[str]) -> report.ReportInputs:
    results = report.ReportInputs()
    curves: Dict[int, list] = {}
    for d in dirs:
        if not os.path.isdir(d):
            raise MissingInput(f"input directory {d} does not exist")
        sol = os.path.join(d, "solution.json")
        if os.path.exists(sol):
            if results.threshold is not None:
                raise BadParameters("more than one solution.json among the inputs")
            with open(sol, encoding="utf-8") as fh:
                results.threshold = solver.ThresholdAnalysis.from_dict(json.load(fh)["threshold_analysis"])
        for path in sorted(glob.glob(os.path.join(d, "curve_seed*.csv"))):
            seed = int(os.path.basename(path)[len("curve_seed"):-len(".csv")])
            if seed in curves:
                raise BadParameters(f"seed {seed} appears in more than one input")
            table = report.read_table_csv(path)
            names = list(table)
            curves[seed] = [dict(zip(names, row)) for row in zip(*(table[n] for n in names))]
        probe = os.path.join(d, "probe.csv")
        if os.path.exists(probe):
            if results.probe is not None:
                raise BadParameters("more than one probe.csv among the inputs")
            results.probe = report.read_table_csv(probe)
    results.curves = curves or None
    return results


def cmd_report(s, out) -> dict:
    if not s["report.inputs"]:
        raise MissingInput("report needs --inputs")
    paths = report.emit_report(load_results(s["report.inputs"]), out, s["report.format"])
    for p in paths:
        print(p)
    return {}


HANDLERS = {
    "solve": cmd_solve, "train": cmd_train, "simulate": cmd_simulate, "evaluate": cmd_evaluate,
    "probe": cmd_probe, "ingest": cmd_ingest, "report": cmd_report,
}


def _fail(kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return 1


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        settings = resolve_settings(ns.command, ns)
        out = settings["out"]
        started, t0 = time.time(), time.perf_counter()
        extra = HANDLERS[ns.command](settings, out)
        _write_meta(out, ns.command, started, time.perf_counter() - t0, extra)
    except IPStopError as exc:
        return _fail(exc.kind, str(exc))
    except OSError as exc:
        return _fail("IoError", f"{exc.filename or ''}: {exc.strerror or exc}".strip(": "))
    return 0


if __name__ == "__main__":
    sys.exit(main())
