"""Command-line front end: ``mvmv <command> -c config.json -o outdir``.

Experiments are described by a JSON file (schema in ``schema/config.schema.json``);
flags only set the seed, the output directory and the worker count.  Output
files never contain timings or worker counts, so re-running a command with the
same inputs reproduces them byte for byte.

Exit status: 0 on pass, 1 when a verdict fails, 2 on any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .coefficients import PRESETS, preset_defaults, validate_hypotheses
from .dynamics import NoisePlan, solve_limit_ode, solve_mv_ensemble, solve_skeleton
from .errors import ConfigError, MvmvError
from .harness import (ExperimentPlan, run_clt, run_convergence, run_ldp_tail,
                      run_mdp_equivalence)
from .monotone import to_config
from .rate import Control, rate_endpoint, rate_tube

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "limit", "convergence", "clt", "ldp-tail", "mdp-equiv", "rate",
            "validate")

log = logging.getLogger("mvmv")

_PLAN_KEYS = {
    "preset": "preset", "params": "params", "operator": "operator", "xi": "xi", "T": "T",
    "steps": "steps", "epsilon_grid": "epsilons", "replicas": "replicas",
    "particles": "particles", "moments": "moments", "delta": "delta", "kappa": "kappa",
    "seed": "seed", "target": "target", "radius": "radius", "slope_band": "slope_band",
    "r2_min": "r2_min",
}


@dataclass(frozen=True)
class RunConfig:
    command: str
    config: Path
    out: Path
    seed: int | None = None
    workers: int = 1
    verbosity: int = 0


# --- configuration ------------------------------------------------------------

def _schema():
    text = resources.files("mvmv").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _key_line(text: str, path) -> int | None:
    """Line of the first occurrence of the innermost named key of ``path``."""
    keys = [p for p in path if isinstance(p, str)]
    if not keys:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(keys[-1]), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _field(path) -> str:
    out = ""
    for p in path:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def load_config(path) -> tuple[ExperimentPlan, dict]:
    """Read, validate and default a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: cannot read configuration ({e.strerror or e})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from None
    errors = sorted(jsonschema.Draft202012Validator(_schema()).iter_errors(raw),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        line = _key_line(text, e.absolute_path)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: field '{_field(e.absolute_path)}': {e.message}")
    return _plan_from(raw, path, text), raw


def _plan_from(raw: dict, path, text="") -> ExperimentPlan:
    def fail(key, msg):
        line = _key_line(text, [key])
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: field '{key}': {msg}")

    if raw["preset"] not in PRESETS:
        fail("preset", f"unknown preset {raw['preset']!r}; choose from {sorted(PRESETS)}")
    eps = raw.get("epsilon_grid")
    if eps is not None and any(b >= a for a, b in zip(eps, eps[1:])):
        fail("epsilon_grid", "epsilon grid must be strictly decreasing")
    kappa = raw.get("kappa", 0.25)
    if not 0.0 < kappa < 0.5:
        fail("kappa", f"kappa={kappa} outside the open interval (0, 1/2); the speed "
                      "a(eps)=eps^kappa needs a(eps)->0 and eps/a(eps)^2->0")
    kw = {dst: raw[src] for src, dst in _PLAN_KEYS.items() if src in raw}
    T = float(raw.get("T", 1.0))
    if "steps" not in raw and "dt" in raw:
        kw["steps"] = max(1, int(round(T / raw["dt"])))
    for k in ("xi", "target"):
        if k in kw:
            kw[k] = tuple(np.atleast_1d(kw[k]).tolist())
    if "epsilons" in kw:
        kw["epsilons"] = tuple(kw["epsilons"])
    try:
        plan = ExperimentPlan(**kw)
        c = plan.coefficients()
        op = plan.operator_obj()
    except MvmvError as e:
        raise ConfigError(f"{path}: {e}") from None
    if op.dim != c.d:
        fail("operator", f"operator dimension {op.dim} differs from the preset's {c.d}")
    if len(plan.initial()) != c.d:
        fail("xi", f"initial condition must have dimension {c.d}")
    return plan


def parse_config(path) -> ExperimentPlan:
    return load_config(path)[0]


# --- output helpers -----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _write_json(path: Path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _clean(obj):
    # json cannot carry inf/nan; spell them out
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else repr(float(obj))
    return obj


def _summary(cmd, plan, passed, body):
    return _clean({
        "schema_version": SCHEMA_VERSION,
        "command": cmd,
        "passed": bool(passed),
        "plan": plan.to_dict(),
        **body,
    })


def _path_rows(path):
    t = path.grid.times
    return [[t[k], *path.X[k], *path.K[k], path.var_K[k]] for k in range(len(t))]


def _path_header(d):
    return ["t", *[f"X_{i + 1}" for i in range(d)], *[f"K_{i + 1}" for i in range(d)],
            "varK"]


def _report_csv(path, rep):
    rows = [[e, v, s, bool(c)] for e, v, s, c in zip(rep.epsilons, rep.estimates, rep.stderr,
                                                   rep.censored)]
    _write_csv(path, ["epsilon", "estimate", "stderr", "censored"], rows)
    with open(path, "a", newline="") as fh:
        slope = "nan" if rep.slope is None else repr(float(rep.slope))
        r2 = "nan" if rep.r2 is None else repr(float(rep.r2))
        fh.write(f"slope,{slope},r2,{r2}\n")


# --- commands -----------------------------------------------------------------

def _cmd_limit(plan, raw, out, args):
    c, op = plan.coefficients(), plan.operator_obj()
    X0 = solve_limit_ode(c, op, plan.initial(), plan.grid())
    _write_csv(out / "limit.csv", _path_header(c.d), _path_rows(X0))
    _write_json(out / "summary.json", _summary("limit", plan, True, {
        "endpoint": X0.X[-1].tolist(), "var_K": float(X0.var_K[-1]),
        "operator": to_config(op)}))
    return True


def _cmd_simulate(plan, raw, out, args):
    c, op = plan.coefficients(), plan.operator_obj()
    grid = plan.grid()
    eps = float(raw.get("epsilon", plan.epsilons[0]))
    X0 = solve_limit_ode(c, op, plan.initial(), grid)
    ens = solve_mv_ensemble(c, op, plan.initial(), eps, plan.particles, grid, plan.noise())
    dev = np.sum((ens.X - X0.X[None]) ** 2, axis=-1)
    sup_stat = np.mean(np.maximum.accumulate(dev, axis=1), axis=0)
    mean = ens.mean()
    mcols = ["mean"] if c.d == 1 else [f"mean_{i + 1}" for i in range(c.d)]
    rows = [[t, *mean[k], ens.second_moment()[k], sup_stat[k]]
            for k, t in enumerate(grid.times)]
    _write_csv(out / "ensemble.csv", ["t", *mcols, "second_moment", "sup_stat"], rows)
    n_paths = min(int(raw.get("save_paths", 3)), plan.particles)
    for i in range(n_paths):
        _write_csv(out / f"path_{i}.csv", _path_header(c.d), _path_rows(ens.path(i)))
    _write_json(out / "summary.json", _summary("simulate", plan, True, {
        "epsilon": eps, "particles": plan.particles, "paths_written": n_paths,
        "sup_stat_T": float(sup_stat[-1])}))
    return True


def _cmd_convergence(plan, raw, out, args):
    rep = run_convergence(plan, workers=args.workers)
    log.info("convergence finished in %.1fs", rep.runtime)
    _report_csv(out / "convergence.csv", rep)
    _write_json(out / "summary.json", _summary("convergence", plan, rep.passed,
                                               {"reports": [rep.summary()]}))
    return rep.passed


def _cmd_clt(plan, raw, out, args):
    reps = run_clt(plan, workers=args.workers)
    for rep in reps:
        _report_csv(out / f"clt_p{rep.details['p']}.csv", rep)
    passed = all(r.passed for r in reps)
    _write_json(out / "summary.json", _summary("clt", plan, passed,
                                               {"reports": [r.summary() for r in reps]}))
    return passed


def _cmd_ldp(plan, raw, out, args):
    target = args.target if args.target is not None else plan.target
    rep = run_ldp_tail(plan, target=target, workers=args.workers)
    _report_csv(out / "ldp_tail.csv", rep)
    _write_json(out / "summary.json", _summary("ldp-tail", plan, rep.passed,
                                               {"reports": [rep.summary()]}))
    return rep.passed


def _cmd_mdp(plan, raw, out, args):
    rep = run_mdp_equivalence(plan, workers=args.workers)
    _report_csv(out / "mdp_equiv.csv", rep)
    _write_json(out / "summary.json", _summary("mdp-equiv", plan, rep.passed,
                                               {"reports": [rep.summary()]}))
    return rep.passed


def _cmd_rate(plan, raw, out, args):
    c, op = plan.coefficients(), plan.operator_obj()
    grid = plan.grid()
    rc = raw.get("rate", {})
    mode = rc.get("mode", "MDP")
    kind = args.kind or rc.get("kind", "endpoint")
    tol = float(rc.get("tol", 1e-6))
    X0 = solve_limit_ode(c, op, plan.initial(), grid)
    if kind == "endpoint":
        target = args.target if args.target is not None else rc.get("target", plan.target)
        if target is None:
            raise ConfigError("rate: an endpoint target is required (--target or rate.target)")
        target = np.atleast_1d(np.asarray(target, dtype=float))
        if target.shape != (c.d,):
            raise ConfigError(f"rate: target must have dimension {c.d}")
        res = rate_endpoint(c, op, X0, mode, target, tol=tol, segments=rc.get("segments"))
        extra = {"target": target.tolist()}
    else:
        h0 = rc.get("reference_control")
        if h0 is None:
            raise ConfigError("rate: tube targets need rate.reference_control")
        ref = solve_skeleton(c, op, X0, Control.constant(grid, h0).values, mode)
        res = rate_tube(c, op, X0, mode, ref.X, tol=tol, segments=rc.get("segments"))
        extra = {"reference_control": np.atleast_1d(h0).tolist()}
    _write_csv(out / "rate.csv", ["value", "residual", "iterations", "converged", "norm_sq"],
               [[res.value, res.residual, res.iterations, res.converged, res.norm_sq]])
    h = res.control.values
    _write_csv(out / "rate_control.csv", ["t", *[f"h_{i + 1}" for i in range(h.shape[1])]],
               [[t, *h[k]] for k, t in enumerate(grid.times[:-1])])
    _write_json(out / "summary.json", _summary("rate", plan, res.converged, {
        "mode": mode, "kind": kind, "value": res.value, "residual": res.residual,
        "iterations": res.iterations, "converged": res.converged, "norm_sq": res.norm_sq,
        "method": res.method, **extra}))
    return res.converged


def _cmd_validate(plan, raw, out, args):
    c = plan.coefficients()
    radius = float(raw.get("probe_radius", preset_defaults(plan.preset)["probe_radius"]))
    rng = np.random.default_rng(NoisePlan(plan.seed, 1).key)
    rep = validate_hypotheses(c, int(raw.get("probes", 1000)), rng, radius=radius)
    body = {"preset": plan.preset, "report": rep.to_dict()}
    _write_json(out / "validate.json", _clean({"schema_version": SCHEMA_VERSION, **body}))
    _write_json(out / "summary.json", _summary("validate", plan, rep.passed, body))
    print(json.dumps(_clean(rep.to_dict()), sort_keys=True))
    return rep.passed


_HANDLERS = {
    "simulate": _cmd_simulate,
    "limit": _cmd_limit,
    "convergence": _cmd_convergence,
    "clt": _cmd_clt,
    "ldp-tail": _cmd_ldp,
    "mdp-equiv": _cmd_mdp,
    "rate": _cmd_rate,
    "validate": _cmd_validate,
}


def _parser():
    ap = argparse.ArgumentParser(prog="mvmv", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"mvmv {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", required=True, type=Path)
        sp.add_argument("-o", "--out", type=Path, default=Path("out"))
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("-v", "--verbose", action="count", default=0)
        if name in ("rate", "ldp-tail"):
            sp.add_argument("--target", type=float, nargs="+", default=None)
        if name == "rate":
            sp.add_argument("--kind", choices=("endpoint", "tube"), default=None)
    return ap


def _workers(flag):
    if flag is not None:
        return flag
    env = os.environ.get("MVMV_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"MVMV_WORKERS must be an integer, got {env!r}") from None
    return 1


def run_command(cfg: RunConfig, args=None) -> int:
    plan, raw = load_config(cfg.config)
    if cfg.seed is not None:
        if not 0 <= cfg.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        plan = replace(plan, seed=cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    ns = argparse.Namespace(workers=cfg.workers, target=None, kind=None)
    if args is not None:
        ns.target = getattr(args, "target", None)
        ns.kind = getattr(args, "kind", None)
    passed = _HANDLERS[cfg.command](plan, raw, cfg.out, ns)
    return 0 if passed else 1


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        workers = _workers(args.workers)
        if workers < 1:
            raise ConfigError("worker count must be positive")
        cfg = RunConfig(args.command, args.config, args.out, args.seed, workers, args.verbose)
        return run_command(cfg, args)
    except Exception as e:  # every failure maps to exit 2 with one line
        if args.verbose > 1:
            log.exception("traceback")
        msg = " ".join(str(e).split()) or type(e).__name__
        print(f"mvmv: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
