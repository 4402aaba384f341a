"""Command-line driver: run / spectrum / bench / cond-table over a JSON config.

The single source of truth for a run is a JSON configuration file; every
artifact (CSV series, snapshots, stats, eigenvalue dumps) is a pure
function of it, so identical configs produce bit-identical outputs apart
from wall-clock fields.  Unknown configuration keys are rejected rather
than ignored.

Exit codes: 0 success, 1 configuration error, 2 solver failure (partial
outputs are flushed before exiting).
"""

from __future__ import annotations

import argparse
import itertools
import json
import os
import sys
from pathlib import Path

import numpy as np

from .diagnostics import (
    certificates_to_json,
    condition_number,
    linearized_instance,
    preconditioned_spectrum,
    theorem_certificates,
)
from .blocks import BlockOperator
from .linalg import LinearSolveError
from .mesh import build_mesh
from .params import Params
from .precond import PrecondConfig
from .scheme import SimulationAborted, run_simulation


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


# Allowed keys and defaults; None means "required".
_SCHEMA = {
    "mesh": {"dim": 1, "n": None},
    "params": {
        "eps": None,
        "sigma": None,
        "dt": None,
        "m": 0.0,
        "T": 0.0,
        "seed": 0,
        "amplitude": 1.0,
    },
    "precond": {
        "kind": "none",
        "alpha": "trace_a",
        "eps1": 1e-2,
        "eps2": None,
        "safety": 1.5,
        "adaptive": False,
        "inner_method": "auto",
    },
    "solver": {
        "gmres_tol": 1e-10,
        "gmres_max": 300,
        "restart": None,
        "cg_tol": 1e-12,
        "fp_tol": 1e-9,
        "fp_max": 50,
        "ss_tol": 1e-10,
        "fp_strict": True,
    },
    "output": {"dir": "okprecond-out", "snapshot_times": []},
    "bench": {
        "dofs": [],
        "eps_sigma": [],
        "preconds": [],
        "steps": 100,
    },
    "cond": {"sizes": [], "dense_threshold": 4200},
    "spectrum": {"operators": ["raw"], "dense_threshold": 2000},
}

_OPTIONAL_SECTIONS = {"bench", "cond", "spectrum"}
_NO_DEFAULT = object()


def _check_keys(section: str, data: dict, allowed: dict):
    for key in data:
        if key not in allowed:
            raise ConfigError(
                f"unknown key {section}.{key!r}; allowed: {sorted(allowed)}"
            )


def load_config(path: str, overrides=()):
    """Parse, override, validate, and default-fill a configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {key!r} crosses a non-object")
        node[parts[-1]] = parsed

    cfg = {}
    for section, fields in _SCHEMA.items():
        src = raw.get(section, {})
        if not isinstance(src, dict):
            raise ConfigError(f"section {section!r} must be an object")
        _check_keys(section, src, fields)
        out = {}
        for key, default in fields.items():
            if key in src:
                out[key] = src[key]
            elif default is None and key in ("n", "eps", "sigma", "dt"):
                if section in _OPTIONAL_SECTIONS:
                    out[key] = default
                else:
                    raise ConfigError(f"missing required key {section}.{key}")
            else:
                out[key] = default
        cfg[section] = out
    for key in raw:
        if key not in _SCHEMA:
            raise ConfigError(f"unknown section {key!r}; allowed: {sorted(_SCHEMA)}")

    env_dir = os.environ.get("OK_OUTPUT_DIR")
    if env_dir:
        cfg["output"]["dir"] = env_dir
    return cfg


def _params_from(cfg, **updates) -> Params:
    p = dict(cfg["params"])
    s = cfg["solver"]
    p.update(
        tol_fp=s["fp_tol"],
        k_max=s["fp_max"],
        gmres_tol=s["gmres_tol"],
        gmres_max=s["gmres_max"],
        restart=s["restart"],
        cg_tol=s["cg_tol"],
        tol_ss=s["ss_tol"],
    )
    p.update(updates)
    try:
        return Params(**p)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _pcfg_from(cfg) -> PrecondConfig:
    try:
        return PrecondConfig(**cfg["precond"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _mesh_from(cfg):
    mcfg = cfg["mesh"]
    try:
        return build_mesh(int(mcfg["dim"]), int(mcfg["n"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid mesh config: {exc}") from exc


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_series_csv(path: Path, stats):
    lines = ["step,t,energy,mass,fp_iters,gmres_avg"]
    for s in stats:
        lines.append(
            f"{s.index},{s.t!r},{s.energy!r},{s.mass_mean!r},"
            f"{s.fp_iterations},{s.gmres_avg!r}"
        )
    path.write_text("\n".join(lines) + "\n")


def _write_snapshot_csv(path: Path, mesh, U, W):
    if mesh.dim == 1:
        lines = ["x,u,w"]
        for x, u, w in zip(mesh.vertices, U, W):
            lines.append(f"{x!r},{u!r},{w!r}")
    else:
        lines = ["x,y,u,w"]
        for (x, y), u, w in zip(mesh.vertices, U, W):
            lines.append(f"{x!r},{y!r},{u!r},{w!r}")
    path.write_text("\n".join(lines) + "\n")


def _flush_run_outputs(outdir: Path, mesh, result) -> None:
    _write_series_csv(outdir / "series.csv", result.stats)
    for t, U, W in result.snapshots:
        _write_snapshot_csv(outdir / f"snapshot_t{t:.6f}.csv", mesh, U, W)
    stats = result.aggregates()
    (outdir / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")


def cmd_run(cfg) -> int:
    mesh = _mesh_from(cfg)
    params = _params_from(cfg)
    pcfg = _pcfg_from(cfg)
    outdir = _outdir(cfg)
    try:
        result = run_simulation(
            params,
            mesh,
            pcfg,
            snapshot_times=cfg["output"]["snapshot_times"],
            strict_fp=cfg["solver"]["fp_strict"],
        )
    except SimulationAborted as exc:
        _flush_run_outputs(outdir, mesh, exc.result)
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2
    _flush_run_outputs(outdir, mesh, result)
    print(f"run finished: {result.n_time_steps} steps, artifacts in {outdir}")
    return 0


def cmd_spectrum(cfg) -> int:
    mesh = _mesh_from(cfg)
    params = _params_from(cfg)
    outdir = _outdir(cfg)
    threshold = int(cfg["spectrum"]["dense_threshold"])
    operators = cfg["spectrum"]["operators"]
    known = {"raw": "none", "bt": "bt", "el": "el", "mhss": "mhss"}
    for op in operators:
        if op not in known:
            raise ConfigError(f"unknown spectrum operator {op!r}; allowed {sorted(known)}")
    if 2 * mesh.p > threshold:
        print(
            f"mesh has 2p = {2*mesh.p} unknowns, above the dense threshold "
            f"{threshold}; use a smaller mesh or raise spectrum.dense_threshold",
            file=sys.stderr,
        )
        return 1
    for op in operators:
        report = preconditioned_spectrum(
            mesh,
            params,
            PrecondConfig(kind=known[op], alpha=cfg["precond"]["alpha"]),
            dense_threshold=threshold,
        )
        (outdir / f"spectrum_{op}.csv").write_text(report.eigenvalues_csv())
    bundle = theorem_certificates(mesh, params, dense_threshold=threshold)
    (outdir / "certificates.json").write_text(certificates_to_json(bundle) + "\n")
    print(f"spectra for {', '.join(operators)} written to {outdir}")
    return 0


def cmd_bench(cfg) -> int:
    bench = cfg["bench"]
    dofs = bench["dofs"]
    pairs = bench["eps_sigma"]
    kinds = bench["preconds"]
    if not dofs or not pairs or not kinds:
        print("bench.dofs, bench.eps_sigma and bench.preconds must be nonempty",
              file=sys.stderr)
        return 1
    outdir = _outdir(cfg)
    rows = ["dof,eps,sigma,precond,T_pc,IT,T_G,cpu1_s,cpu2_s,converged"]
    for dof, (eps, sigma), kind in itertools.product(dofs, pairs, kinds):
        dt = float(eps) ** 2
        try:
            params = _params_from(
                cfg, eps=float(eps), sigma=float(sigma), dt=dt,
                T=bench["steps"] * dt,
            )
            pcfg_kw = dict(cfg["precond"])
            pcfg_kw["kind"] = kind
            pcfg = PrecondConfig(**pcfg_kw)
            mesh = build_mesh(int(cfg["mesh"]["dim"]), int(dof) - 1)
            result = run_simulation(params, mesh, pcfg,
                                    strict_fp=cfg["solver"]["fp_strict"])
            rows.append(
                f"{dof},{float(eps)!r},{float(sigma)!r},{kind},"
                f"{result.total_pc_steps},{result.avg_gmres_per_pc_step!r},"
                f"{result.avg_pc_per_time_step!r},{result.cpu1_s!r},"
                f"{result.cpu2_s!r},true"
            )
        except (SimulationAborted, LinearSolveError, ValueError) as exc:
            rows.append(
                f"{dof},{float(eps)!r},{float(sigma)!r},{kind},0,0.0,0.0,0.0,0.0,false"
            )
            print(f"cell (dof={dof}, eps={eps}, sigma={sigma}, {kind}) "
                  f"failed: {exc}", file=sys.stderr)
    (outdir / "bench.csv").write_text("\n".join(rows) + "\n")
    print(f"bench results written to {outdir / 'bench.csv'}")
    return 0


def cmd_cond_table(cfg) -> int:
    sizes = cfg["cond"]["sizes"]
    if not sizes:
        print("cond.sizes must be nonempty", file=sys.stderr)
        return 1
    threshold = int(cfg["cond"]["dense_threshold"])
    params = _params_from(cfg)
    outdir = _outdir(cfg)
    rows = ["p,dof,cond"]
    for p_target in sizes:
        mesh = build_mesh(1, int(p_target) - 1)
        if 2 * mesh.p > threshold:
            print(f"size p={p_target} exceeds dense threshold {threshold}; skipped",
                  file=sys.stderr)
            continue
        inst = linearized_instance(mesh, params)
        op = BlockOperator("full", inst["M"], inst["S"], inst["L"], params)
        kappa = condition_number(op.dense(), dense_threshold=threshold)
        rows.append(f"{mesh.p},{2*mesh.p},{kappa!r}")
    (outdir / "cond_table.csv").write_text("\n".join(rows) + "\n")
    print(f"condition numbers written to {outdir / 'cond_table.csv'}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="okprecond",
        description="Convex-splitting Ohta-Kawasaki solver and preconditioner bench",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "time-march a configuration and write series/snapshots/stats"),
        ("spectrum", "dense spectra and theorem certificates (desk scale)"),
        ("bench", "iteration-count sweep over dof x (eps,sigma) x preconditioner"),
        ("cond-table", "condition numbers of the raw system over mesh sizes"),
    ):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("config", help="JSON configuration file")
        sp.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config entry, e.g. --set params.eps=0.05",
        )
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.set)
        handler = {
            "run": cmd_run,
            "spectrum": cmd_spectrum,
            "bench": cmd_bench,
            "cond-table": cmd_cond_table,
        }[args.command]
        return handler(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SimulationAborted, LinearSolveError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
