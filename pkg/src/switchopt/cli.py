"""Command-line front end: manifest-driven runs and the step-size sweep.

A run manifest is an INI file with four sections::

    [model]
    name = double_tank          # or: spec_file = model.json
    # further keys override model parameters, e.g.  t_f = 30.0

    [solve]
    dt = 0.01                   # required
    integrator = euler          # euler | trapezoid
    max_iters = 100
    alpha = 0.5
    beta = 0.5
    theta_tol = 1e-6
    max_backtracks = 40
    shooting_segments = 10      # optional
    shooting_penalty = 22.5     # optional (default 2.5 * (segments - 1))
    armijo_on_blend = false
    seed = 0                    # recorded; reserved for randomized suites

    [init]
    kind = one_hot              # one_hot | uniform | csv
    mode = 1                    # 0-based, for one_hot
    u_0 = 0.0                   # constant input for mode 0, etc.
    csv = start.csv             # for kind = csv

    [output]
    dir = out
    pwm_cycle = 0.1             # optional: also write a PWM projection

Exit codes: 0 solved (converged or iteration cap), 2 manifest error,
3 step failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import re
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .benchmarks import BENCHMARK_DEFAULTS, builtin_model
from .control import (EmbeddedControl, pwm_project, read_control_csv,
                      write_control_csv, write_ordinary_csv)
from .model import HybridModel, affine_quadratic_model
from .sim import eval_cost, integrate_costate, integrate_state, write_costate_csv, \
    write_trajectory_csv
from .solver import SolveConfig, SolveStatus, solve, write_iteration_log

__all__ = ["ManifestError", "RunManifest", "parse_manifest", "run", "table1",
           "main", "console_main"]

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_STEP_FAILURE = 3
EXIT_IO = 4


class ManifestError(Exception):
    """The manifest file is missing, malformed or inconsistent."""


@dataclass
class RunManifest:
    model_name: Optional[str]
    model_spec_file: Optional[str]
    model_overrides: dict
    config: SolveConfig
    init_kind: str
    init_mode: int
    init_inputs: dict
    init_csv: Optional[str]
    out_dir: str
    pwm_cycle: Optional[float]
    seed: int
    path: Optional[str] = None

    def build_model(self) -> HybridModel:
        if self.model_name is not None:
            return builtin_model(self.model_name, self.model_overrides)
        base = Path(self.path).parent if self.path else Path.cwd()
        spec_path = Path(self.model_spec_file)
        if not spec_path.is_absolute():
            spec_path = base / spec_path
        with open(spec_path) as fh:
            return affine_quadratic_model(json.load(fh))

    def build_initial_control(self, model: HybridModel) -> EmbeddedControl:
        if self.init_kind == "uniform":
            return EmbeddedControl.uniform(model, self.config.dt)
        if self.init_kind == "one_hot":
            inputs = [self.init_inputs.get(i, np.zeros(m.control_dim))
                      for i, m in enumerate(model.modes)]
            return EmbeddedControl.one_hot(model, self.config.dt,
                                           self.init_mode, inputs)
        base = Path(self.path).parent if self.path else Path.cwd()
        csv_path = Path(self.init_csv)
        if not csv_path.is_absolute():
            csv_path = base / csv_path
        return read_control_csv(csv_path)


_SECTIONS = ("model", "solve", "init", "output")
_SOLVE_KEYS = {
    "dt": float, "integrator": str, "max_iters": int, "alpha": float,
    "beta": float, "theta_tol": float, "max_backtracks": int,
    "shooting_segments": int, "shooting_penalty": float,
    "armijo_on_blend": bool, "seed": int,
}
_INIT_KEYS = {"kind": str, "mode": int, "csv": str}
_OUTPUT_KEYS = {"dir": str, "pwm_cycle": float}


def _key_line(path, section, key) -> str:
    """Best-effort line locator for error messages."""
    try:
        in_section = False
        for lineno, line in enumerate(open(path), start=1):
            stripped = line.strip()
            if stripped.startswith("["):
                in_section = stripped == f"[{section}]"
            elif in_section and re.match(rf"^{re.escape(key)}\s*[=:]", stripped):
                return f"{path}:{lineno}"
    except OSError:
        pass
    return str(path)


def _convert(path, section, key, raw, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ManifestError(
            f"{_key_line(path, section, key)}: [{section}] {key} = {raw!r} "
            f"is not a valid {typ.__name__}") from None


def _parse_vector(path, section, key, raw) -> np.ndarray:
    try:
        return np.array([float(v) for v in raw.replace(",", " ").split()])
    except ValueError:
        raise ManifestError(
            f"{_key_line(path, section, key)}: [{section}] {key} = {raw!r} "
            "is not a number or list of numbers") from None


def parse_manifest(path) -> RunManifest:
    """Read and validate a run manifest; defaults applied, unknown keys rejected."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None,
                                       inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ManifestError(f"{path}: {err}") from None

    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ManifestError(
            f"{path}: unknown section(s) {sorted(unknown)}; expected "
            f"{list(_SECTIONS)}")
    for section in ("model", "solve", "output"):
        if section not in parser:
            raise ManifestError(f"{path}: section [{section}] required")

    # [model]
    model_sec = parser["model"]
    name = model_sec.get("name")
    spec_file = model_sec.get("spec_file")
    if (name is None) == (spec_file is None):
        raise ManifestError(
            f"{path}: [model] needs exactly one of 'name' or 'spec_file'")
    overrides = {}
    for key in model_sec:
        if key in ("name", "spec_file"):
            continue
        vec = _parse_vector(path, "model", key, model_sec[key])
        overrides[key] = float(vec[0]) if vec.size == 1 else vec

    # [solve]
    solve_sec = parser["solve"]
    if "dt" not in solve_sec:
        raise ManifestError(f"{path}: [solve] dt required")
    values = {}
    for key in solve_sec:
        if key not in _SOLVE_KEYS:
            raise ManifestError(
                f"{_key_line(path, 'solve', key)}: unknown [solve] key {key!r}; "
                f"accepted: {', '.join(sorted(_SOLVE_KEYS))}")
        values[key] = _convert(path, "solve", key, solve_sec[key], _SOLVE_KEYS[key])
    seed = values.pop("seed", 0)
    config = SolveConfig(
        dt=values["dt"],
        integrator=values.get("integrator", "euler"),
        max_iters=values.get("max_iters", 100),
        armijo_alpha=values.get("alpha", 0.1),
        armijo_beta=values.get("beta", 0.5),
        theta_tol=values.get("theta_tol", 1e-6),
        max_backtracks=values.get("max_backtracks", 40),
        shooting_segments=values.get("shooting_segments"),
        shooting_penalty=values.get("shooting_penalty"),
        armijo_on_blend=values.get("armijo_on_blend", False),
    )
    if config.integrator not in ("euler", "trapezoid"):
        raise ManifestError(
            f"{path}: [solve] integrator must be 'euler' or 'trapezoid'")

    # [init]
    init_kind, init_mode, init_csv = "uniform", 0, None
    init_inputs = {}
    if "init" in parser:
        init_sec = parser["init"]
        for key in init_sec:
            if key in _INIT_KEYS:
                continue
            if re.fullmatch(r"u_\d+", key):
                continue
            raise ManifestError(
                f"{_key_line(path, 'init', key)}: unknown [init] key {key!r}; "
                f"accepted: kind, mode, csv, u_<mode index>")
        init_kind = init_sec.get("kind", "uniform")
        if init_kind not in ("one_hot", "uniform", "csv"):
            raise ManifestError(
                f"{path}: [init] kind must be one_hot, uniform or csv")
        init_mode = _convert(path, "init", "mode", init_sec.get("mode", "0"), int)
        init_csv = init_sec.get("csv")
        if init_kind == "csv" and init_csv is None:
            raise ManifestError(f"{path}: [init] csv path required for kind=csv")
        for key in init_sec:
            if re.fullmatch(r"u_\d+", key):
                init_inputs[int(key[2:])] = _parse_vector(
                    path, "init", key, init_sec[key])

    # [output]
    out_sec = parser["output"]
    for key in out_sec:
        if key not in _OUTPUT_KEYS:
            raise ManifestError(
                f"{_key_line(path, 'output', key)}: unknown [output] key {key!r}; "
                f"accepted: {', '.join(sorted(_OUTPUT_KEYS))}")
    if "dir" not in out_sec:
        raise ManifestError(f"{path}: [output] dir required")
    pwm_cycle = None
    if "pwm_cycle" in out_sec:
        pwm_cycle = _convert(path, "output", "pwm_cycle", out_sec["pwm_cycle"],
                             float)

    return RunManifest(
        model_name=name, model_spec_file=spec_file, model_overrides=overrides,
        config=config, init_kind=init_kind, init_mode=init_mode,
        init_inputs=init_inputs, init_csv=init_csv,
        out_dir=out_sec["dir"], pwm_cycle=pwm_cycle, seed=seed, path=str(path))


def run(manifest: RunManifest, echo=print) -> int:
    """Execute a manifest: solve, write artifacts, report final J and gap."""
    try:
        model = manifest.build_model()
        w0 = manifest.build_initial_control(model)
    except (KeyError, ValueError, OSError, json.JSONDecodeError) as err:
        echo(f"error: {err}")
        return EXIT_PARSE

    result = solve(model, w0, manifest.config)

    try:
        out = Path(manifest.out_dir)
        if manifest.path and not out.is_absolute():
            out = Path(manifest.path).parent / out
        out.mkdir(parents=True, exist_ok=True)
        write_iteration_log(result.history, out / "iterations.csv")
        write_control_csv(result.control, out / "control_final.csv")
        traj = integrate_state(model, result.control,
                               method=manifest.config.integrator,
                               shooting=result.shooting)
        write_trajectory_csv(traj, out / "trajectory_final.csv")
        costate = integrate_costate(model, result.control, traj, result.shooting)
        write_costate_csv(costate, out / "costate_final.csv")

        echo(f"model: {model.name or 'custom'}   seed: {manifest.seed}")
        echo(f"status: {result.status.value}   iterations: {result.iterations}")
        echo(f"initial J: {result.initial_cost:.6g}")
        echo(f"final J: {result.cost:.6g}   theta: {result.final_theta:.3e}")

        if manifest.pwm_cycle is not None:
            pwm = pwm_project(result.control, manifest.pwm_cycle)
            write_ordinary_csv(pwm, out / "pwm_control.csv")
            pwm_embedded = pwm.to_embedded()
            pwm_traj = integrate_state(model, pwm_embedded,
                                       method=manifest.config.integrator)
            pwm_cost = eval_cost(model, pwm_embedded, pwm_traj)
            echo(f"pwm cost (cycle {manifest.pwm_cycle:g}): {pwm_cost:.6g}")
            if model.terminal_penalty is not None:
                excl = pwm_cost - float(model.terminal_penalty(pwm_traj.final_state))
                echo(f"pwm cost excluding penalty: {excl:.6g}")
    except OSError as err:
        echo(f"I/O error: {err}")
        return EXIT_IO

    if result.status is SolveStatus.STEP_FAILURE:
        echo(f"step failure: {result.failure}")
        return EXIT_STEP_FAILURE
    return EXIT_OK


_TABLE1_ROWS = ((0.01, 100), (0.01, 50), (0.1, 100), (0.1, 50))


def table1(out_csv=None, manifest: Optional[RunManifest] = None,
           echo=print) -> list:
    """Step-size/iteration sweep of the double-tank benchmark.

    Runs the four (dt, iterations) combinations and reports initial cost,
    final cost and wall time per row.  A manifest may override solver
    constants but must select the double_tank model.
    """
    if manifest is not None and manifest.model_name != "double_tank":
        raise ValueError("table1 requires the double_tank model")
    defaults = BENCHMARK_DEFAULTS["double_tank"]
    alpha = manifest.config.armijo_alpha if manifest else defaults["armijo_alpha"]
    beta = manifest.config.armijo_beta if manifest else defaults["armijo_beta"]
    model = builtin_model("double_tank",
                          manifest.model_overrides if manifest else None)

    rows = []
    echo(f"{'dt':>6} {'iters':>6} {'J_initial':>10} {'J_final':>10} {'seconds':>8}")
    for dt, iters in _TABLE1_ROWS:
        config = SolveConfig(dt=dt, integrator="euler", max_iters=iters,
                             armijo_alpha=alpha, armijo_beta=beta)
        w0 = EmbeddedControl.one_hot(model, dt, mode=1)
        start = time.perf_counter()
        result = solve(model, w0, config)
        seconds = time.perf_counter() - start
        rows.append((dt, iters, result.initial_cost, result.cost, seconds))
        echo(f"{dt:>6g} {iters:>6d} {result.initial_cost:>10.4f} "
             f"{result.cost:>10.4f} {seconds:>8.3f}")

    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            fh.write("dt,iters,J_initial,J_final,seconds\n")
            for dt, iters, j0, jk, sec in rows:
                fh.write(f"{dt:.17g},{iters},{j0:.17g},{jk:.17g},{sec:.3f}\n")
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="switchopt",
        description="Solve switched-mode optimal control problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="solve the problem described by a manifest")
    p_run.add_argument("manifest", help="path to an INI run manifest")

    p_table = sub.add_parser("table1",
                             help="double-tank step-size/iteration sweep")
    p_table.add_argument("--manifest", default=None,
                         help="optional manifest overriding solver constants")
    p_table.add_argument("--out", default=None, help="write the table to a CSV")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            manifest = parse_manifest(args.manifest)
            return run(manifest)
        manifest = parse_manifest(args.manifest) if args.manifest else None
        try:
            table1(out_csv=args.out, manifest=manifest)
        except OSError as err:
            print(f"I/O error: {err}")
            return EXIT_IO
        return EXIT_OK
    except ManifestError as err:
        print(f"manifest error: {err}")
        return EXIT_PARSE
    except ValueError as err:
        print(f"error: {err}")
        return EXIT_PARSE


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
