"""Command-line interface.

All subcommands take a JSON config file plus a few overriding flags and
write their results into an output directory.  Runs are deterministic for
a fixed seed: reruns produce byte-identical outputs, so no timestamps are
written.  Provenance (tool version, config digest, effective seed) goes
into every JSON output.

Exit codes: 0 on success (a -inf log likelihood is still a success), 2 for
config errors, 1 for runtime failures in simulation or inference.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .exact import ExactError, loglik_events, loglik_lineages
from .filtering import (FilterConfig, FilterError, WeightGrid, boundary_flux,
                        oracle_loglik, replicate_loglik, smc_loglik)
from .genealogy import (GenealogyError, NewickError, build_genealogy, prune,
                        read_genealogy, to_newick, write_genealogy)
from .models import MODELS, build_model, lbdp_truncation, s2ir_truncation, sir_truncation
from .population import (History, IntegrationError, JumpSequence, SimulationError,
                         read_trajectory, simulate, to_history, write_trajectory)


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


_FILTER_PROPS = {
    "n_particles": {"type": "integer", "minimum": 1},
    "n_reps": {"type": "integer", "minimum": 1},
    "ess_threshold": {"type": "number", "minimum": 0, "maximum": 1},
    "resampling": {"enum": ["systematic", "multinomial"]},
    "weighting": {"enum": ["analytic-survival", "rejection"]},
}

_SCHEMA = {
    "type": "object",
    "required": ["schema_version", "model"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "seed": {"type": "integer", "minimum": 0},
        "model": {
            "type": "object",
            "required": ["name", "params"],
            "additionalProperties": False,
            "properties": {
                "name": {"enum": sorted(MODELS)},
                "params": {"type": "object"},
                "mu": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "inputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "trajectory": {"type": "string"},
                "genealogy": {"type": "string"},
            },
        },
        "simulate": {
            "type": "object",
            "required": ["horizon"],
            "additionalProperties": False,
            "properties": {
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "max_jumps": {"type": "integer", "minimum": 1},
            },
        },
        "filter": {
            "type": "object",
            "additionalProperties": False,
            "properties": dict(_FILTER_PROPS),
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "n_max": {"type": "integer", "minimum": 0},
            },
        },
        "profile": {
            "type": "object",
            "required": ["parameter", "values"],
            "additionalProperties": False,
            "properties": {
                "parameter": {"type": "string"},
                "values": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                "include_oracle": {"type": "boolean"},
                "n_max": {"type": "integer", "minimum": 0},
                **_FILTER_PROPS,
            },
        },
    },
}


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        config = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from None
    validator = jsonschema.Draft202012Validator(_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = ".".join(str(p) for p in err.absolute_path)
        where = f"config.{where}" if where else "config"
        raise ConfigError(f"{where}: {err.message}")
    config["_sha256"] = hashlib.sha256(raw.encode()).hexdigest()
    config["_dir"] = path.parent
    return config


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        if math.isfinite(val):
            return val
        return "-inf" if val < 0 else ("inf" if val > 0 else "nan")
    return obj


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _resolve_seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    if config.get("seed") is not None:
        return int(config["seed"])
    return int(np.random.SeedSequence().entropy) % (2 ** 63)


def _provenance(config, seed: int) -> dict:
    return {"tool": f"genfilter {__version__}",
            "config_sha256": config["_sha256"],
            "seed": seed}


def _build_spec(config):
    model = config["model"]
    try:
        return build_model(model["name"], model["params"], mu=model.get("mu", 1.0))
    except ValueError as exc:
        raise ConfigError(f"config.model.params: {exc}") from None


def _input_path(config, key: str) -> Path:
    inputs = config.get("inputs", {})
    if key not in inputs:
        raise ConfigError(f"config.inputs.{key} is required for this command")
    p = Path(inputs[key])
    return p if p.is_absolute() else config["_dir"] / p


def _filter_config(section: dict, seed: int) -> FilterConfig:
    return FilterConfig(
        n_particles=section.get("n_particles", 1000),
        seed=seed,
        ess_threshold=section.get("ess_threshold", 0.5),
        resampling=section.get("resampling", "systematic"),
        weighting=section.get("weighting", "analytic-survival"),
    )


def _truncation(config, spec):
    section = config.get("oracle", {})
    params = spec.params
    if spec.name == "lbdp":
        if "n_max" not in section:
            raise ConfigError("config.oracle.n_max is required for model lbdp")
        from .models import LBDPParams
        return lbdp_truncation(LBDPParams(**params), section["n_max"])
    if spec.name in ("sir", "sirs"):
        from .models import SIRParams
        keep = {k: params[k] for k in ("transmission_rate", "recovery_rate",
                                       "sampling_rate", "s0", "i0", "r0")}
        if isinstance(keep["transmission_rate"], dict):
            keep["transmission_rate"] = 0.0
        return sir_truncation(SIRParams(**keep))
    if spec.name == "s2ir":
        from .models import S2IRParams
        return s2ir_truncation(S2IRParams(**params))
    raise ConfigError(f"no truncation rule for model {spec.name!r}")


def cmd_simulate(args, config, out: Path) -> int:
    if "simulate" not in config:
        raise ConfigError("config.simulate is required for this command")
    spec = _build_spec(config)
    seed = _resolve_seed(args, config)
    prov = _provenance(config, seed)
    rng = np.random.default_rng(seed)
    horizon = config["simulate"]["horizon"]
    max_jumps = config["simulate"].get("max_jumps")
    traj = simulate(spec, horizon, rng, max_jumps=max_jumps)
    write_trajectory(out / "trajectory", spec, traj, seed=seed, provenance=prov)
    g, _ = build_genealogy(spec, traj)
    write_genealogy(out / "genealogy_full.json", g, provenance=prov)
    visible = prune(g)
    write_genealogy(out / "genealogy_visible.json", visible, provenance=prov)
    tmp = out / "genealogy_visible.nwk.tmp"
    tmp.write_text(to_newick(visible))
    os.replace(tmp, out / "genealogy_visible.nwk")
    print(f"simulated {len(traj.jumps)} jumps over [0, {horizon}] -> {out}")
    return 0


def cmd_prune(args, config, out: Path) -> int:
    seed = _resolve_seed(args, config)
    g = read_genealogy(_input_path(config, "genealogy"))
    visible = prune(g)
    prov = _provenance(config, seed)
    write_genealogy(out / "genealogy_visible.json", visible, provenance=prov)
    tmp = out / "genealogy_visible.nwk.tmp"
    tmp.write_text(to_newick(visible))
    os.replace(tmp, out / "genealogy_visible.nwk")
    print(f"pruned genealogy -> {out}")
    return 0


def cmd_filter(args, config, out: Path) -> int:
    spec = _build_spec(config)
    seed = _resolve_seed(args, config)
    section = config.get("filter", {})
    fc = _filter_config(section, seed)
    v = read_genealogy(_input_path(config, "genealogy"))
    n_reps = section.get("n_reps", 1)
    prov = _provenance(config, seed)
    if n_reps == 1:
        res = smc_loglik(spec, v, fc)
        res.diagnostics.to_csv(out / "diagnostics.csv", provenance=prov)
        result = {"loglik": res.loglik,
                  "n_particles": fc.n_particles,
                  "n_reps": 1,
                  "collapsed": res.diagnostics.collapsed,
                  "resample_count": res.diagnostics.resample_count,
                  "provenance": prov}
        shown = res.loglik
    else:
        rep0_seed = np.random.SeedSequence(seed).spawn(n_reps)[0]
        smc_loglik(spec, v, fc, rng=np.random.default_rng(rep0_seed)) \
            .diagnostics.to_csv(out / "diagnostics.csv", provenance=prov)
        rep = replicate_loglik(spec, v, fc, n_reps)
        result = {"mean": rep.mean, "se": rep.se,
                  "estimates": list(rep.estimates),
                  "n_particles": fc.n_particles,
                  "n_reps": n_reps,
                  "collapse_count": rep.collapse_count,
                  "provenance": prov}
        shown = rep.mean
    _write_json(out / "result.json", result)
    print(f"filter loglik {shown} ({fc.n_particles} particles, {n_reps} reps) -> {out}")
    return 0


def cmd_oracle(args, config, out: Path) -> int:
    spec = _build_spec(config)
    seed = _resolve_seed(args, config)
    v = read_genealogy(_input_path(config, "genealogy"))
    section = config.get("oracle", {})
    tol = section.get("tol", 1e-8)
    truncation = _truncation(config, spec)
    loglik, grid = oracle_loglik(spec, v, truncation, tol=tol, return_grid=True)
    flux = boundary_flux(spec, grid, t=v.time)
    result = {"loglik": loglik, "tol": tol, "n_states": int(len(grid.states)),
              "boundary_flux": flux, "provenance": _provenance(config, seed)}
    _write_json(out / "result.json", result)
    print(f"oracle loglik {loglik} ({len(grid.states)} states) -> {out}")
    return 0


def cmd_exact(args, config, out: Path) -> int:
    spec = _build_spec(config)
    seed = _resolve_seed(args, config)
    traj, _header = read_trajectory(_input_path(config, "trajectory"))
    if isinstance(traj, History) or not isinstance(traj, JumpSequence):
        raise ConfigError("config.inputs.trajectory: full jump records with the "
                          "aux column are required for the exact routes")
    by_lineage = loglik_lineages(spec, traj)
    g, _ = build_genealogy(spec, traj)
    visible = prune(g)
    by_events = loglik_events(spec, to_history(traj), visible)
    diff = abs(by_lineage - by_events) if math.isfinite(by_lineage) and \
        math.isfinite(by_events) else (0.0 if by_lineage == by_events else math.inf)
    result = {"loglik_lineages": by_lineage, "loglik_events": by_events,
              "difference": diff, "provenance": _provenance(config, seed)}
    _write_json(out / "result.json", result)
    print(f"exact loglik {by_lineage} (routes differ by {diff}) -> {out}")
    return 0


def cmd_profile(args, config, out: Path) -> int:
    if "profile" not in config:
        raise ConfigError("config.profile is required for this command")
    section = config["profile"]
    model = config["model"]
    name = model["name"]
    param = section["parameter"]
    cls, _ = MODELS[name]
    if param not in cls.__dataclass_fields__:
        raise ConfigError(f"config.profile.parameter: model {name!r} has no "
                          f"parameter {param!r}")
    seed = _resolve_seed(args, config)
    v = read_genealogy(_input_path(config, "genealogy"))
    values = section["values"]
    include_oracle = section.get("include_oracle", False)
    sub_seeds = np.random.SeedSequence(seed).generate_state(len(values), dtype=np.uint64)
    n_reps = section.get("n_reps", 1)
    rows = []
    for value, sub in zip(values, sub_seeds):
        params = dict(model["params"])
        params[param] = value
        try:
            spec = build_model(name, params, mu=model.get("mu", 1.0))
        except ValueError as exc:
            raise ConfigError(f"config.profile.values: {exc}") from None
        fc = _filter_config(section, int(sub))
        rep = replicate_loglik(spec, v, fc, n_reps)
        row = {"value": value, "mean": rep.mean, "se": rep.se,
               "n_particles": fc.n_particles, "n_reps": n_reps,
               "collapsed": rep.collapse_count}
        if include_oracle:
            oracle_config = dict(config)
            oracle_config["model"] = {"name": name, "params": params,
                                      "mu": model.get("mu", 1.0)}
            if "n_max" in section:
                oracle_config["oracle"] = {**config.get("oracle", {}),
                                           "n_max": section["n_max"]}
            truncation = _truncation(oracle_config, spec)
            row["oracle"] = oracle_loglik(spec, v, truncation,
                                          tol=config.get("oracle", {}).get("tol", 1e-8))
        rows.append(row)
    header = ["value", "mean", "se", "n_particles", "n_reps", "collapsed"]
    if include_oracle:
        header.append("oracle")
    lines = [f"# {k}: {val}" for k, val in _provenance(config, seed).items()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_csv_cell(row[h]) for h in header))
    tmp = out / "profile.csv.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out / "profile.csv")
    print(f"profiled {param} at {len(values)} values -> {out}")
    return 0


def _csv_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genfilter",
        description="Simulate partially observed population processes and "
                    "compute genealogy likelihoods.")
    parser.add_argument("--version", action="version", version=f"genfilter {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "simulate": (cmd_simulate, "simulate a trajectory and its genealogies"),
        "prune": (cmd_prune, "reduce a full genealogy to its visible part"),
        "filter": (cmd_filter, "particle-filter log likelihood of a genealogy"),
        "oracle": (cmd_oracle, "deterministic truncated-grid log likelihood"),
        "exact": (cmd_exact, "closed-form likelihood routes for a full trajectory"),
        "profile": (cmd_profile, "likelihood profile over one model parameter"),
    }
    for name, (func, help_text) in handlers.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default="out", help="output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, config, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SimulationError, IntegrationError, GenealogyError, NewickError,
            FilterError, ExactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
