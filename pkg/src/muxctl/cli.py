"""Command-line driver: TOML configs in, CSV trajectories and key=value reports out.

Config schema (TOML)::

    mode = "lq"              # "reach" | "lq" | "mayer"
    eta = 1                  # optional, only reach problems may use 0
    t_hat = 3.5
    n_steps = 4000           # optional
    output_dir = "out"       # optional, overridden by --out

    [solver]                 # optional, any SolverConfig field
    residual_tol = 5e-4
    continuation_eps_schedule = [0.1, 0.01, 0.001, 0.0]

    [[system]]               # one table per subsystem, in multiplexer order
    name = "oscillator"
    model = "harmonic_oscillator"    # or "cart_pendulum" with params = {m, M, g, L}
    # A = [[...], ...]; B = [...]    # instead of model; a flat B is one column
    lambda = 2.0
    action_set = "unbounded"         # or {kind = "interval", lower, upper},
                                     # {kind = "box", lower = [..], upper = [..]},
                                     # {kind = "finite", points = [[..], ..]}
    Q = 2.0                  # scalar -> multiple of I, flat list -> diagonal,
    R = 2.0                  # nested list -> full matrix
    Qhat = 200.0
    x0 = [1.0, 0.5]
    xhat = [0.0, 0.0]

``--config paper_lq`` and ``--config paper_mayer`` (or any path with that
stem that does not exist on disk) load the bundled benchmark configs.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .dynamics import TimeGrid, Trajectory
from .ensemble import ActionSet, LinearSubsystem, assemble_joint, cart_pendulum, harmonic_oscillator
from .errors import ConfigError, MuxError, NoConvergence, ParseError, ValidationError
from .pmp_law import ProblemMode
from .shooting import (
    ShootingProblem,
    SolveReport,
    SolverConfig,
    build_trajectory,
    residual,
    simulate_controls,
    solve,
)
from .verify import (
    ZERO_TOL,
    check_admissible,
    check_multiplexing,
    evaluate_costs,
    hamiltonian_trace,
    hamiltonian_values,
    joint_off_measure,
    l0_norm,
)

log = logging.getLogger("muxctl")

BENCHMARK_DIR = Path(__file__).with_name("benchmarks")
BUILTINS = ("paper_lq", "paper_mayer")

EXIT_OK, EXIT_INPUT, EXIT_FAILED = 0, 1, 2

HAMILTONIAN_TOL = 5e-2
LOOSE_ZERO_TOL = 1e-4

_TOP_KEYS = {"mode", "eta", "t_hat", "n_steps", "output_dir", "solver", "system"}
_SYSTEM_KEYS = {"name", "model", "params", "A", "B", "lambda", "action_set", "Q", "R", "Qhat", "x0", "xhat"}
_SOLVER_KEYS = {f.name for f in dataclasses.fields(SolverConfig)}
_MODELS = {
    "harmonic_oscillator": (lambda: harmonic_oscillator(), ()),
    "cart_pendulum": (cart_pendulum, ("m", "M", "g", "L")),
}


# -- config ----------------------------------------------------------------


@contextlib.contextmanager
def _at(key):
    """Re-raise anything thrown while reading ``key`` as a ValidationError."""
    try:
        yield
    except ValidationError as exc:
        if exc.key is None:
            raise ValidationError(f"{key}: {exc}", key) from exc
        raise
    except (MuxError, ValueError, TypeError, KeyError) as exc:
        raise ValidationError(f"{key}: {exc}", key) from exc


def _reject_unknown(table, allowed, where):
    extra = sorted(set(table) - allowed)
    if extra:
        key = f"{where}.{extra[0]}" if where else extra[0]
        raise ValidationError(f"unknown key {key!r} (allowed: {', '.join(sorted(allowed))})", key)


def _number(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ValidationError(f"{key}: expected a number, got {v!r}", key)
    return float(v)


def _array(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float, list)):
        raise ValidationError(f"{key}: expected a number or array, got {type(v).__name__}", key)
    with _at(key):
        arr = np.array(v, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{key}: entries must be finite", key)
    return arr


def _weight(v, n, key):
    """Scalar -> ``v I``, vector -> diagonal, nested list -> matrix."""
    arr = _array(v, key)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        if arr.size != n:
            raise ValidationError(f"{key}: diagonal needs {n} entries, got {arr.size}", key)
        return np.diag(arr)
    return arr


def _action_set(v, m, key):
    if v == "unbounded":
        return ActionSet.unbounded(m)
    if not isinstance(v, dict):
        raise ValidationError(f"{key}: expected \"unbounded\" or a table with 'kind'", key)
    kind = v.get("kind")
    allowed = {
        "unbounded": {"kind"},
        "interval": {"kind", "lower", "upper"},
        "box": {"kind", "lower", "upper"},
        "finite": {"kind", "points"},
    }
    if kind not in allowed:
        raise ValidationError(f"{key}.kind: expected one of {sorted(allowed)}, got {kind!r}", f"{key}.kind")
    _reject_unknown(v, allowed[kind], key)
    with _at(key):
        if kind == "unbounded":
            return ActionSet.unbounded(m)
        if kind == "finite":
            return ActionSet.finite(_array(v["points"], f"{key}.points"))
        lo, hi = _array(v["lower"], f"{key}.lower"), _array(v["upper"], f"{key}.upper")
        if kind == "interval":
            return ActionSet.interval(float(lo), float(hi))
        return ActionSet.box(lo, hi)


def _subsystem(table, k, mode):
    where = f"system[{k}]"
    if not isinstance(table, dict):
        raise ValidationError(f"{where}: expected a table", where)
    _reject_unknown(table, _SYSTEM_KEYS, where)
    if "model" in table:
        if "A" in table or "B" in table:
            raise ValidationError(f"{where}: give either 'model' or 'A'/'B', not both", f"{where}.model")
        name = table["model"]
        if name not in _MODELS:
            raise ValidationError(f"{where}.model: unknown model {name!r} (known: {', '.join(_MODELS)})", f"{where}.model")
        builder, names = _MODELS[name]
        params = table.get("params", {})
        if not isinstance(params, dict):
            raise ValidationError(f"{where}.params: expected a table", f"{where}.params")
        _reject_unknown(params, set(names), f"{where}.params")
        missing = [n for n in names if n not in params]
        if missing:
            raise ValidationError(f"{where}.params: missing {', '.join(missing)}", f"{where}.params.{missing[0]}")
        A, B = builder(*(_number(params[n], f"{where}.params.{n}") for n in names))
    else:
        for req in ("A", "B"):
            if req not in table:
                raise ValidationError(f"{where}: needs 'model' or both 'A' and 'B'", f"{where}.{req}")
        A, B = _array(table["A"], f"{where}.A"), _array(table["B"], f"{where}.B")
        if B.ndim == 1:
            B = B[:, None]
        if A.ndim != 2 or B.ndim != 2:
            raise ValidationError(f"{where}: A and B must be matrices", f"{where}.A")
    d, m = A.shape[0], B.shape[1]

    required = ["lambda", "x0"]
    required += {"lq": ["Q", "R", "Qhat"], "mayer": ["Qhat", "xhat"], "reach": ["xhat"]}[mode]
    for req in required:
        if req not in table:
            raise ValidationError(f"{where}.{req}: required for {mode} problems", f"{where}.{req}")

    action = _action_set(table.get("action_set", "unbounded"), m, f"{where}.action_set")
    kwargs = {}
    for name, size in (("Q", d), ("R", m), ("Qhat", d)):
        if name in table:
            kwargs[name] = _weight(table[name], size, f"{where}.{name}")
    for name in ("x0", "xhat"):
        if name in table:
            kwargs[name] = np.atleast_1d(_array(table[name], f"{where}.{name}"))
    label = table.get("name", f"S{k + 1}")
    if not isinstance(label, str):
        raise ValidationError(f"{where}.name: expected a string", f"{where}.name")
    with _at(where):
        return LinearSubsystem(A, B, action, _number(table["lambda"], f"{where}.lambda"), name=label, **kwargs)


def _solver(table, overrides=None):
    if not isinstance(table, dict):
        raise ValidationError("solver: expected a table", "solver")
    _reject_unknown(table, _SOLVER_KEYS, "solver")
    kwargs = dict(table)
    if "continuation_eps_schedule" in kwargs:
        kwargs["continuation_eps_schedule"] = tuple(_array(kwargs["continuation_eps_schedule"], "solver.continuation_eps_schedule").ravel())
    if "p0_init" in kwargs:
        kwargs["p0_init"] = _array(kwargs["p0_init"], "solver.p0_init").ravel()
    kwargs.update(overrides or {})
    with _at("solver"):
        return SolverConfig(**kwargs)


@dataclass
class RunConfig:
    mode: str
    eta: int
    subsystems: list
    t_hat: float
    n_steps: int
    solver: SolverConfig
    output_dir: Optional[str] = None
    source: str = "<string>"

    @property
    def problem_mode(self) -> ProblemMode:
        return ProblemMode(self.mode, self.eta)

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.t_hat, self.n_steps)

    def build_problem(self) -> ShootingProblem:
        with _at("config"):
            return ShootingProblem.from_joint(assemble_joint(self.subsystems), self.problem_mode, self.grid)

    def with_overrides(self, seed=None, eta=None, eps_schedule=None) -> "RunConfig":
        solver = self.solver
        changes = {}
        if seed is not None:
            changes["rng_seed"] = int(seed)
        if eps_schedule is not None:
            changes["continuation_eps_schedule"] = tuple(eps_schedule)
        if changes:
            with _at("solver"):
                solver = replace(solver, **changes)
        out = replace(self, solver=solver, eta=self.eta if eta is None else int(eta))
        with _at("eta"):
            out.problem_mode
        return out


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    """Parse and fully validate a TOML run config."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        raise ParseError(f"{source}: {exc}", line=line) from exc
    _reject_unknown(data, _TOP_KEYS, "")
    for req in ("mode", "t_hat", "system"):
        if req not in data:
            raise ValidationError(f"missing required key {req!r}", req)
    mode = data["mode"]
    if mode not in ("reach", "lq", "mayer"):
        raise ValidationError(f"mode: expected reach, lq or mayer, got {mode!r}", "mode")
    eta = data.get("eta", 1)
    if eta not in (0, 1) or isinstance(eta, bool):
        raise ValidationError(f"eta: expected 0 or 1, got {eta!r}", "eta")
    systems = data["system"]
    if not isinstance(systems, list) or not systems:
        raise ValidationError("system: need at least one [[system]] table", "system")
    subs = [_subsystem(t, k, mode) for k, t in enumerate(systems)]
    t_hat = _number(data["t_hat"], "t_hat")
    n_steps = data.get("n_steps", 4000)
    if isinstance(n_steps, bool) or not isinstance(n_steps, int):
        raise ValidationError(f"n_steps: expected an integer, got {n_steps!r}", "n_steps")
    out_dir = data.get("output_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ValidationError("output_dir: expected a string", "output_dir")
    with _at("t_hat"):
        TimeGrid(t_hat, n_steps)
    cfg = RunConfig(mode, eta, subs, t_hat, n_steps, _solver(data.get("solver", {})), out_dir, source)
    with _at("eta"):
        cfg.problem_mode
    cfg.build_problem()
    return cfg


def resolve_config_path(name) -> Path:
    """Path on disk, or a bundled benchmark selected by name or stem."""
    path = Path(name)
    if path.is_file():
        return path
    stem = path.name[: -len(".toml")] if path.name.endswith(".toml") else path.name
    if stem in BUILTINS:
        return BENCHMARK_DIR / f"{stem}.toml"
    raise ConfigError(f"config file not found: {path}")


def load_config(name) -> RunConfig:
    path = resolve_config_path(name)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, source=str(path))


# -- artifacts -------------------------------------------------------------


def _g(v) -> str:
    return "%.17g" % float(v)


def _r(v) -> str:
    # shortest round-trip form for report values
    return repr(float(v))


def _vec(v) -> str:
    return ",".join(_r(x) for x in np.ravel(v))


def _flag(b) -> str:
    return "true" if b else "false"


def trajectory_header(joint) -> list:
    cols = ["t"]
    cols += [f"x_{i + 1}" for i in range(joint.d)]
    cols += [f"u_{i + 1}" for i in range(joint.m)]
    cols += [f"p_{i + 1}" for i in range(joint.d)]
    return cols + ["sigma", "H"]


def write_trajectory_csv(path, traj: Trajectory, joint) -> Path:
    path = Path(path)
    t = traj.t
    H = traj.H if traj.H is not None else np.full(t.size, np.nan)
    lines = [",".join(trajectory_header(joint))]
    for i in range(t.size):
        row = [_g(t[i])]
        row += [_g(v) for v in traj.x[i]]
        row += [_g(v) for v in traj.u[i]]
        row += [_g(v) for v in traj.p[i]]
        row += [str(int(traj.sigma[i])), _g(H[i])]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_control_csvs(out_dir, traj: Trajectory, joint) -> list:
    paths = []
    t = traj.t
    for k, sl in enumerate(joint.control_slices):
        u = traj.u[:, sl]
        lines = [",".join(["t"] + [f"u_{j + 1}" for j in range(u.shape[1])])]
        lines += [",".join([_g(t[i])] + [_g(v) for v in u[i]]) for i in range(t.size)]
        path = Path(out_dir) / f"controls_{k + 1}.csv"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        paths.append(path)
    return paths


def _read_csv(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}: empty file", line=1)
    header = [h.strip() for h in rows[0]]
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise ParseError(f"{path}:{i + 2}: expected {len(header)} fields, got {len(row)}", line=i + 2)
        try:
            data[i] = [float(v) for v in row]
        except ValueError as exc:
            raise ParseError(f"{path}:{i + 2}: {exc}", line=i + 2) from exc
    return header, data


def read_trajectory_csv(path, problem: ShootingProblem) -> Trajectory:
    joint, grid = problem.joint, problem.grid
    header, data = _read_csv(path)
    expected = trajectory_header(joint)
    if header != expected:
        raise ParseError(f"{path}:1: header does not match the config (expected {','.join(expected)})", line=1)
    if data.shape[0] != grid.n_steps + 1:
        raise ValidationError(f"{path}: {data.shape[0]} rows, the config grid has {grid.n_steps + 1} nodes", "n_steps")
    if np.max(np.abs(data[:, 0] - grid.nodes)) > 1e-9 * max(1.0, grid.t_hat):
        raise ValidationError(f"{path}: time column does not match the config grid", "t_hat")
    d, m = joint.d, joint.m
    x = data[:, 1 : 1 + d]
    u = data[:, 1 + d : 1 + d + m]
    p = data[:, 1 + d + m : 1 + 2 * d + m]
    sigma = data[:, 1 + 2 * d + m].astype(int)
    traj = Trajectory(grid, x, p, u, sigma, data[:, -1])
    return traj


def read_controls_csv(path, problem: ShootingProblem) -> np.ndarray:
    """Joint controls from a CSV holding columns ``u_1..u_m`` (extra columns ignored)."""
    header, data = _read_csv(path)
    names = [f"u_{i + 1}" for i in range(problem.joint.m)]
    missing = [n for n in names if n not in header]
    if missing:
        raise ParseError(f"{path}:1: missing control columns {', '.join(missing)}", line=1, key=missing[0])
    U = data[:, [header.index(n) for n in names]]
    if U.shape[0] != problem.grid.n_steps + 1:
        raise ValidationError(f"{path}: {U.shape[0]} rows, the config grid has {problem.grid.n_steps + 1} nodes", "n_steps")
    return U


def _parse_vector(text, what):
    path = Path(text)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
    try:
        return np.array([float(v) for v in text.replace("\n", ",").split(",") if v.strip()])
    except ValueError as exc:
        raise ParseError(f"{what}: {exc}", key=what) from exc


def _trajectory_lines(traj, problem, zero_tol=ZERO_TOL):
    joint = problem.joint
    costs = evaluate_costs(traj, problem, zero_tol)
    trace = hamiltonian_trace(traj, problem, zero_tol=zero_tol)
    mux = check_multiplexing(traj, joint.control_slices, zero_tol)
    mux_loose = check_multiplexing(traj, joint.control_slices, LOOSE_ZERO_TOL)
    adm = check_admissible(traj, joint)
    lines = [
        f"cost.total={_r(costs.total)}",
        f"cost.weighted_l0={_r(costs.weighted_l0)}",
        f"cost.quadratic_running={_r(costs.quadratic_running)}",
        f"cost.terminal={_r(costs.terminal)}",
    ]
    for k, sl in enumerate(joint.control_slices):
        lines.append(f"l0.{k + 1}={_r(costs.l0_per_subsystem[k])}")
        lines.append(f"l0_loose.{k + 1}={_r(l0_norm(traj.u[:, sl], problem.grid, LOOSE_ZERO_TOL))}")
    lines += [
        f"joint_off_measure={_r(joint_off_measure(traj.u, problem.grid, joint.control_slices, LOOSE_ZERO_TOL))}",
        f"hamiltonian.median={_r(trace.median)}",
        f"hamiltonian.spread={_r(trace.spread)}",
        f"hamiltonian.relative_spread={_r(trace.relative_spread)}",
        f"multiplexing.passed={_flag(mux.passed)}",
        f"multiplexing.violations={len(mux.violations)}",
        f"multiplexing.violation_nodes={','.join(str(i) for i in mux.violations[:20])}",
        f"multiplexing_loose.passed={_flag(mux_loose.passed)}",
        f"admissibility.violations={len(adm)}",
        f"x_final={_vec(traj.x[-1])}",
        f"switch_count={len(traj.switch_times or ())}",
    ]
    return lines, mux, adm, trace


def report_lines(report: SolveReport, cfg: RunConfig, problem: ShootingProblem) -> list:
    """Flat, deterministic ``key=value`` rendering of a solve report."""
    lines = [
        f"source={cfg.source}",
        f"mode={cfg.mode}",
        f"eta={report.eta_used}",
        f"t_hat={_r(cfg.t_hat)}",
        f"n_steps={cfg.n_steps}",
        f"converged={_flag(report.converged)}",
        f"residual_norm={_r(report.residual_norm)}",
        f"residual_tol={_r(report.residual_tol)}",
        f"iterations={report.iterations}",
        f"seed={report.seed}",
        f"eps_schedule={_vec(report.eps_schedule)}",
    ]
    for i, st in enumerate(report.stages):
        pre = f"stage.{i + 1}"
        lines += [
            f"{pre}.eps={_r(st.eps)}",
            f"{pre}.converged={_flag(st.converged)}",
            f"{pre}.residual_norm={_r(st.residual_norm)}",
            f"{pre}.iterations={st.iterations}",
            f"{pre}.restarts={st.restarts}",
        ]
    lines.append(f"p0={_vec(report.p0)}")
    body, _, _, _ = _trajectory_lines(report.trajectory, problem)
    lines += body
    lines.append(f"extremals.count={len(report.extremals)}")
    for i, (_, total) in enumerate(report.extremals):
        lines.append(f"extremals.{i + 1}.cost={_r(total)}")
    sign = report.extras.get("riccati_feedback_sign")
    if sign is not None:
        lines.append(f"riccati_feedback_sign={','.join(str(s) for s in sign)}")
    return lines


def _write_artifacts(out_dir, traj, problem, lines):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_trajectory_csv(out / "trajectory.csv", traj, problem.joint)
        write_control_csvs(out, traj, problem.joint)
        (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot write artifacts to {out}: {exc}") from exc
    return out


# -- subcommands -----------------------------------------------------------


def _out_dir(args, cfg, default):
    return Path(args.out or cfg.output_dir or default)


def solve_config(cfg: RunConfig):
    """Solve a run config; returns ``(report, problem, seconds)``."""
    problem = cfg.build_problem()
    t0 = time.perf_counter()
    report = solve(problem, cfg.solver, strict=False)
    return report, problem, time.perf_counter() - t0


def cmd_solve(args, cfg) -> int:
    report, problem, secs = solve_config(cfg)
    lines = report_lines(report, cfg, problem)
    out = _write_artifacts(_out_dir(args, cfg, "muxctl_out"), report.trajectory, problem, lines)
    ok = report.converged and report.feasibility.passed
    print(f"{'converged' if report.converged else 'NOT converged'}: residual {report.residual_norm:.3g} "
          f"(tol {report.residual_tol:g}), {report.iterations} iterations, {secs:.1f} s")
    print(f"cost {report.costs.total:.6g}, L0 {', '.join(f'{v:.6g}' for v in report.costs.l0_per_subsystem)}, "
          f"multiplexing {'ok' if report.feasibility.passed else 'VIOLATED'}")
    print(f"artifacts in {out}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_simulate(args, cfg) -> int:
    problem = cfg.build_problem()
    if args.p0 is not None:
        p0 = _parse_vector(args.p0, "--p0")
        if p0.size != problem.joint.d:
            raise ValidationError(f"--p0 needs {problem.joint.d} entries, got {p0.size}", "p0")
        traj = build_trajectory(problem, p0)
        r = residual(p0, problem)
        head = [f"p0={_vec(p0)}", f"residual_norm={_r(np.max(np.abs(r)))}", f"residual={_vec(r)}"]
    else:
        U = read_controls_csv(args.controls, problem)
        traj = simulate_controls(problem, U)
        head = [f"controls={args.controls}"]
    lines = [f"source={cfg.source}", f"mode={cfg.mode}", f"eta={cfg.eta}"] + head
    body, mux, adm, _ = _trajectory_lines(traj, problem)
    out = _write_artifacts(_out_dir(args, cfg, "muxctl_out"), traj, problem, lines + body)
    print(f"simulated trajectory written to {out}")
    if not mux.passed or adm:
        print(f"checks failed: {len(mux.violations)} multiplexing, {len(adm)} admissibility violations")
        return EXIT_FAILED
    return EXIT_OK


def terminal_residual(traj, problem) -> np.ndarray:
    """Boundary-condition residual read off the trajectory's last node."""
    xT, pT = traj.x[-1], traj.p[-1]
    kind = problem.mode.kind
    if kind == "reach":
        return xT - problem.x_hat
    if kind == "lq":
        return pT + problem.Qhat @ xT
    return pT + problem.Qhat @ (xT - problem.x_hat)


def cmd_verify(args, cfg) -> int:
    problem = cfg.build_problem()
    path = Path(args.trajectory or _out_dir(args, cfg, "muxctl_out") / "trajectory.csv")
    traj = read_trajectory_csv(path, problem)
    zero_tol = args.zero_tol
    body, mux, adm, trace = _trajectory_lines(traj, problem, zero_tol)
    r = terminal_residual(traj, problem)
    r_norm = float(np.max(np.abs(r)))
    H_dev = float(np.max(np.abs(hamiltonian_values(traj, problem, zero_tol) - traj.H)))
    checks = {
        "multiplexing": mux.passed,
        "admissibility": not adm,
        "boundary": r_norm <= cfg.solver.residual_tol,
        "hamiltonian": trace.relative_spread <= HAMILTONIAN_TOL,
    }
    lines = [f"trajectory={path}", f"zero_tol={_r(zero_tol)}", f"residual_norm={_r(r_norm)}",
             f"H_column_deviation={_r(H_dev)}"] + body
    lines += [f"check.{k}={'pass' if v else 'FAIL'}" for k, v in checks.items()]
    print("\n".join(lines))
    if not mux.passed:
        print(f"multiplexing violated at nodes {mux.violations[:20]}", file=sys.stderr)
    return EXIT_OK if all(checks.values()) else EXIT_FAILED


# oscillator target and pendulum angle bounds of the LQ benchmark
LQ_OSC_TERMINAL = np.array([-0.0133, -0.0046])
LQ_OSC_TOL = 0.05
LQ_ANGLE_TOL = 5e-3
LQ_JOINT_OFF_MIN = 0.3
MAYER_BANG_TOL = 1e-3
RUNTIME_LIMIT = 300.0


def benchmark_rows(lq, lq_problem, lq_secs, mayer, mayer_problem):
    """Acceptance rows ``(criterion, value, target, passed)`` for the two benchmark runs."""
    rows = []
    xT = lq.trajectory.x[-1]
    osc = float(np.max(np.abs(xT[:2] - LQ_OSC_TERMINAL)))
    rows.append(("lq: residual", lq.residual_norm, f"<= {lq.residual_tol:g}", lq.converged))
    rows.append(("lq: oscillator x(T) distance", osc, f"<= {LQ_OSC_TOL:g}", osc <= LQ_OSC_TOL))
    rows.append(("lq: |theta(T)|", abs(xT[4]), f"<= {LQ_ANGLE_TOL:g}", abs(xT[4]) <= LQ_ANGLE_TOL))
    rows.append(("lq: |theta'(T)|", abs(xT[5]), f"<= {LQ_ANGLE_TOL:g}", abs(xT[5]) <= LQ_ANGLE_TOL))
    rows.append(("lq: runtime [s]", lq_secs, f"<= {RUNTIME_LIMIT:g}", lq_secs <= RUNTIME_LIMIT))
    for tag, rep, prob in (("lq", lq, lq_problem), ("mayer", mayer, mayer_problem)):
        mux = check_multiplexing(rep.trajectory, prob.joint.control_slices, LOOSE_ZERO_TOL)
        rows.append((f"{tag}: multiplexing violations", len(mux.violations), "== 0", mux.passed))
    off = joint_off_measure(lq.trajectory.u, lq_problem.grid, lq_problem.joint.control_slices, LOOSE_ZERO_TOL)
    rows.append(("lq: joint-off measure [s]", off, f">= {LQ_JOINT_OFF_MIN:g}", off >= LQ_JOINT_OFF_MIN))
    rows.append(("mayer: residual", mayer.residual_norm, f"<= {mayer.residual_tol:g}", mayer.converged))
    u = mayer.trajectory.u
    bang = float(np.max(np.min(np.abs(u[..., None] - np.array([-1.0, 0.0, 1.0])), axis=-1)))
    rows.append(("mayer: distance to {-1,0,1}", bang, f"<= {MAYER_BANG_TOL:g}", bang <= MAYER_BANG_TOL))
    act_lq, act_m = float(np.sum(lq.l0_loose)), float(np.sum(mayer.l0_loose))
    rows.append(("mayer: active time [s]", act_m, f"> lq {act_lq:.4g}", act_m > act_lq))
    for tag, rep in (("lq", lq), ("mayer", mayer)):
        spread = rep.hamiltonian_spread
        rows.append((f"{tag}: Hamiltonian rel. spread", spread, f"<= {HAMILTONIAN_TOL:g}", spread <= HAMILTONIAN_TOL))
    return rows


def format_rows(rows) -> str:
    width = max(len(r[0]) for r in rows)
    out = [f"{'criterion':<{width}}  {'value':>12}  {'target':<16}  status"]
    for name, value, target, ok in rows:
        out.append(f"{name:<{width}}  {value:>12.4g}  {target:<16}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(out)


def cmd_benchmark(args, _cfg=None) -> int:
    root = Path(args.out or "muxctl_benchmark")
    runs = {}
    for name in BUILTINS:
        cfg = load_config(name).with_overrides(args.seed, None, args.eps_schedule)
        log.info("running %s", name)
        report, problem, secs = solve_config(cfg)
        _write_artifacts(root / name, report.trajectory, problem, report_lines(report, cfg, problem))
        print(f"{name}: {'converged' if report.converged else 'NOT converged'}, "
              f"residual {report.residual_norm:.3g}, {secs:.1f} s")
        runs[name] = (report, problem, secs)
    lq, lq_problem, lq_secs = runs["paper_lq"]
    mayer, mayer_problem, _ = runs["paper_mayer"]
    rows = benchmark_rows(lq, lq_problem, lq_secs, mayer, mayer_problem)
    print(format_rows(rows))
    sign = lq.extras.get("riccati_feedback_sign")
    if sign is not None:
        print(f"Riccati feedback sign (cost-minimizing, per subsystem): {sign}")
    return EXIT_OK if all(r[3] for r in rows) else EXIT_FAILED


# -- entry point -----------------------------------------------------------


def _eps_list(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="muxctl", description="Sparse multiplexed optimal control by indirect shooting.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config, or paper_lq / paper_mayer")
    common.add_argument("--out", help="output directory for artifacts")
    common.add_argument("--seed", type=int, help="override solver.rng_seed")
    common.add_argument("--eta", type=int, choices=(0, 1), help="abnormal multiplier (reach problems only)")
    common.add_argument("--eps-schedule", type=_eps_list, help="comma-separated smoothing widths ending at 0")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="shoot for an extremal and write artifacts")
    sim = sub.add_parser("simulate", parents=[common], help="integrate from a given p(0) or control file")
    src = sim.add_mutually_exclusive_group(required=True)
    src.add_argument("--p0", help="comma-separated p(0), or a file holding it")
    src.add_argument("--controls", help="CSV with columns u_1..u_m on the config grid")
    ver = sub.add_parser("verify", parents=[common], help="re-check an emitted trajectory CSV")
    ver.add_argument("--trajectory", help="trajectory CSV (default: <out>/trajectory.csv)")
    ver.add_argument("--zero-tol", type=float, default=ZERO_TOL, help="threshold below which a control counts as zero")
    sub.add_parser("benchmark", parents=[common], help="run both built-in benchmarks and print the acceptance table")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "benchmark":
            return cmd_benchmark(args)
        if not args.config:
            raise ConfigError(f"{args.command} needs --config")
        cfg = load_config(args.config).with_overrides(args.seed, args.eta, args.eps_schedule)
        return {"solve": cmd_solve, "simulate": cmd_simulate, "verify": cmd_verify}[args.command](args, cfg)
    except NoConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (MuxError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
