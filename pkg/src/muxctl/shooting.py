"""Single shooting on the initial adjoint for the three multiplexing problems.

The unknown is ``p(0)``.  A sweep integrates state (and, for LQ, adjoint)
forward under the pointwise-optimal multiplexed control, and the residual
measures how badly the terminal boundary condition is missed:

=========  ======================================
reach      ``x(T) - xhat``
lq         ``p(T) + Qhat x(T)``
mayer      ``p(T) + Qhat (x(T) - xhat)``
=========  ======================================

The control laws are discontinuous.  Inside any RK4 cell where the discrete
part of the decision (active subsystem, on/off, box vertex) changes, the
switching instant is located by bisection and the step is split there, so
the residual depends continuously on ``p(0)``.  Away from switches the
dynamics are linear with constant coefficients and are advanced with cached
RK4 step matrices.

Root finding is a damped Levenberg-Marquardt iteration with central
finite-difference Jacobians, run along a continuation in the logistic
smoothing width ``eps`` that ends at the exact law (``eps = 0``).
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import TimeGrid, Trajectory, adjoint_transition_stack, expm, rk4_linear_maps
from .ensemble import ActionSet, JointSystem, LinearSubsystem, assemble_joint
from .errors import MissingQ, MissingR, NoConvergence, NonFiniteState, ValidationError
from .pmp_law import (
    ProblemMode,
    RAMP_FLOOR,
    ramp,
    decide_batch,
    detect_feedback_sign,
    lq_feedback_blocks,
    riccati_solve,
)
from .verify import (
    CostBreakdown,
    MultiplexCheck,
    check_admissible,
    check_multiplexing,
    evaluate_costs,
    hamiltonian_trace,
    hamiltonian_values,
    l0_norm,
    support_mask,
)

log = logging.getLogger(__name__)

_BISECT_ITERS = 44
_MAX_SPLITS = 32
_CHUNK = 64


@dataclass(eq=False)
class ShootingProblem:
    """Boundary data and cost matrices of one multiplexing problem.

    Build it with :meth:`from_joint`, which stacks the per-subsystem data.
    """

    joint: JointSystem
    mode: ProblemMode
    grid: TimeGrid
    x_bar: np.ndarray
    x_hat: Optional[np.ndarray] = None
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    Qhat: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.joint.d
        self.x_bar = np.asarray(self.x_bar, dtype=float)
        if self.x_bar.shape != (d,) or not np.all(np.isfinite(self.x_bar)):
            raise ValidationError(f"x_bar must be a finite vector of length {d}")
        kind = self.mode.kind
        if kind in ("reach", "mayer"):
            for sub in self.joint.subsystems:
                sub.action_set.require_compact()
        if kind in ("reach", "mayer") and self.x_hat is None:
            raise ValidationError(f"{kind} problems need a target state x_hat")
        if kind == "lq":
            if self.Q is None:
                raise MissingQ("sparse LQ problems need Q for every subsystem")
            if self.R is None:
                raise MissingR("sparse LQ problems need R for every subsystem")
        if kind in ("lq", "mayer") and self.Qhat is None:
            raise MissingQ(f"{kind} problems need a terminal weight Qhat")
        if self.x_hat is not None:
            self.x_hat = np.asarray(self.x_hat, dtype=float)

    @classmethod
    def from_joint(cls, joint: JointSystem, mode: ProblemMode, grid: TimeGrid) -> "ShootingProblem":
        return cls(
            joint=joint,
            mode=mode,
            grid=grid,
            x_bar=joint.x_bar,
            x_hat=joint.x_hat if mode.kind != "lq" else None,
            Q=joint.Q if mode.kind == "lq" else None,
            R=joint.R if mode.kind == "lq" else None,
            Qhat=joint.Qhat if mode.kind != "reach" else None,
        )

    def with_mode(self, mode: ProblemMode) -> "ShootingProblem":
        return replace(self, mode=mode)

    # cached step data -----------------------------------------------------

    @cached_property
    def adjoint_stack(self):
        return adjoint_transition_stack(self.joint.A, self.grid)

    @cached_property
    def state_step(self):
        T, S = rk4_linear_maps(self.joint.A, self.grid.step)
        return T, S @ self.joint.B

    @cached_property
    def lq_blocks(self):
        """Coupled ``(x, p)`` matrices: the off mode and one per active subsystem."""
        A, d = self.joint.A, self.joint.d
        M0 = np.zeros((2 * d, 2 * d))
        M0[:d, :d] = A
        M0[d:, :d] = self.Q
        M0[d:, d:] = -A.T
        extra = []
        for K in lq_feedback_blocks(self.joint):
            E = np.zeros_like(M0)
            E[:d, d:] = self.joint.B @ K
            extra.append(E)
        return M0, extra

    def lq_matrix(self, sigma: int, scale: float):
        M0, extra = self.lq_blocks
        if sigma == 0 or scale == 0.0:
            return M0
        return M0 + scale * extra[sigma - 1]

    @cached_property
    def _lq_ramp_polys(self):
        """RK4 step matrix of ``M0 + s E_k`` as a polynomial in ``s``.

        Entry ``k`` stacks the coefficients ``C_0..C_4`` (shape ``(5 n, n)``)
        so that one step is ``sum_j s**j C_j z``.
        """
        M0, extra = self.lq_blocks
        h = self.grid.step
        size = M0.shape[0]
        out = {}
        for k, E in enumerate(extra, start=1):
            X = (h * M0, h * E)
            C = [np.eye(size)] + [np.zeros((size, size)) for _ in range(4)]
            words = {(): np.eye(size)}
            for order in range(1, 5):
                nxt = {}
                for w, W in words.items():
                    for b in (0, 1):
                        P = X[b] @ W
                        nxt[w + (b,)] = P
                        C[sum(w) + b] = C[sum(w) + b] + P / math.factorial(order)
                words = nxt
            out[k] = np.vstack(C)
        return out

    @cached_property
    def _lq_powers(self):
        powers = {}
        for sigma in range(self.joint.N + 1):
            T, _ = rk4_linear_maps(self.lq_matrix(sigma, 1.0), self.grid.step)
            stack = np.empty((_CHUNK,) + T.shape)
            stack[0] = T
            for j in range(1, _CHUNK):
                stack[j] = T @ stack[j - 1]
            powers[sigma] = stack
        return powers


@dataclass
class Sweep:
    x: np.ndarray
    p: np.ndarray
    switch_times: list


def _check_finite(arr, what):
    ok = np.all(np.isfinite(arr), axis=1)
    if not np.all(ok):
        node = int(np.argmin(ok))
        raise NonFiniteState(f"non-finite {what} at node {node}", node=node)


def _decide(problem, p, eps):
    sigma, unit, scale = decide_batch(problem.joint, p[None, :], problem.mode, eps)
    return int(sigma[0]), unit[0], float(scale[0])


# -- reachability / Mayer sweep ----------------------------------------------


def _sweep_drift(problem: ShootingProblem, p0, eps: float) -> Sweep:
    joint, grid = problem.joint, problem.grid
    n, h = grid.n_steps, grid.step
    t = grid.nodes
    P = problem.adjoint_stack @ p0
    _check_finite(P, "adjoint")
    sigma, unit, scale = decide_batch(joint, P, problem.mode, eps)
    U = scale[:, None] * unit
    changed = (sigma[1:] != sigma[:-1]) | np.any(unit[1:] != unit[:-1], axis=1)
    T, SB = problem.state_step
    drive = U @ SB.T
    X = np.empty((n + 1, joint.d))
    X[0] = x = problem.x_bar
    switches = []
    At = -joint.A.T
    for i in range(n):
        if not changed[i]:
            x = T @ x + drive[i]
        else:
            x = _split_drift_cell(problem, At, P[i], x, t[i], h, eps, sigma[i + 1], unit[i + 1], switches)
        X[i + 1] = x
    _check_finite(X, "state")
    return Sweep(X, P, switches)


def _split_drift_cell(problem, At, p_left, x, t0, h, eps, sig_end, unit_end, switches):
    """Advance the state across a cell containing control switches."""
    joint = problem.joint
    a = 0.0
    sig_a, unit_a, scale_a = _decide(problem, p_left, eps)
    for _ in range(_MAX_SPLITS):
        if sig_a == sig_end and np.array_equal(unit_a, unit_end):
            break
        lo, hi = a, h
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            s, un, _ = _decide(problem, expm(At, mid) @ p_left, eps)
            if s == sig_a and np.array_equal(un, unit_a):
                lo = mid
            else:
                hi = mid
        Tm, Sm = rk4_linear_maps(joint.A, hi - a)
        x = Tm @ x + Sm @ (joint.B @ (scale_a * unit_a))
        switches.append(t0 + hi)
        a = hi
        sig_a, unit_a, scale_a = _decide(problem, expm(At, a) @ p_left, eps)
    if h - a > 0.0:
        Tm, Sm = rk4_linear_maps(joint.A, h - a)
        x = Tm @ x + Sm @ (joint.B @ (scale_a * unit_a))
    return x


# -- LQ sweep --------------------------------------------------------------


def _sweep_lq(problem: ShootingProblem, p0, eps: float) -> Sweep:
    d = problem.joint.d
    n = problem.grid.n_steps
    Z = np.empty((n + 1, 2 * d))
    Z[0] = np.concatenate([problem.x_bar, p0])
    switches = []
    if eps == 0.0:
        _lq_exact_chunks(problem, Z, switches)
    else:
        _lq_smoothed_steps(problem, Z, eps, switches)
    _check_finite(Z, "state/adjoint")
    return Sweep(Z[:, :d], Z[:, d:], switches)


def _lq_exact_chunks(problem, Z, switches):
    joint, grid, mode = problem.joint, problem.grid, problem.mode
    d, n, h = joint.d, grid.n_steps, grid.step
    t = grid.nodes
    powers = problem._lq_powers
    i = 0
    key = _decide(problem, Z[0, d:], 0.0)[0]
    while i < n:
        J = min(_CHUNK, n - i)
        block = powers[key][:J] @ Z[i]
        if not np.all(np.isfinite(block)):
            raise NonFiniteState(f"non-finite state/adjoint after node {i}", node=i)
        sig = decide_batch(joint, block[:, d:], mode, 0.0)[0]
        diff = np.flatnonzero(sig != key)
        if diff.size == 0:
            Z[i + 1 : i + 1 + J] = block
            i += J
            continue
        j = int(diff[0])
        Z[i + 1 : i + 1 + j] = block[:j]
        i += j
        Z[i + 1] = _split_lq_cell(problem, Z[i], key, 1.0, t[i], h, 0.0, switches)
        i += 1
        key = _decide(problem, Z[i, d:], 0.0)[0]


def _lq_smoothed_steps(problem, Z, eps, switches):
    """Smoothed LQ sweep with the ramp value frozen at the left node of each step.

    Far from the threshold the ramp is exactly 0.0 or 1.0 in floating point,
    and the step is then the cached exact-law step; runs of such steps are
    advanced with the chunked matrix powers.  Only steps that start inside
    the ramp pay for an individual RK4 evaluation.
    """
    joint, grid = problem.joint, problem.grid
    d, n, h = joint.d, grid.n_steps, grid.step
    t = grid.nodes
    lams = joint.lambdas
    G = np.zeros((d, d))
    for K in lq_feedback_blocks(joint):
        G += joint.B @ K
    starts = np.array([sl.start for sl in joint.state_slices])
    powers = problem._lq_powers

    Bt = joint.B.T
    Rinv = np.linalg.inv(problem.R)
    cstarts = np.array([sl.start for sl in joint.control_slices])
    polys = problem._lq_ramp_polys
    size = 2 * d

    def decide_rows(Pm):
        C = Pm @ Bt.T
        q = np.add.reduceat(C * (C @ Rinv.T), cstarts, axis=1)
        k = np.argmax(0.5 * q - lams, axis=1)
        rows = np.arange(Pm.shape[0])
        return k + 1, ramp(q[rows, k] - 2.0 * lams[k], eps)

    scalar_blocks = cstarts.size == joint.m
    rdiag = np.diag(Rinv).copy()
    half_lams = lams.tolist()

    def decide(p):
        c = Bt @ p
        if scalar_blocks:
            q = (c * c * rdiag).tolist()
        else:
            q = np.add.reduceat(c * (Rinv @ c), cstarts).tolist()
        k = max(range(len(q)), key=lambda j: 0.5 * q[j] - half_lams[j])
        arg = (q[k] - 2.0 * half_lams[k]) / eps
        s = 1.0 / (1.0 + math.exp(min(-arg, 700.0))) if arg == arg else arg
        return k + 1, (0.0 if s < RAMP_FLOOR else s)

    i = 0
    z = Z[0]
    sig, s = decide(z[d:])
    while i < n:
        if s == 0.0 or s == 1.0:
            key = sig if s == 1.0 else 0
            J = min(_CHUNK, n - i)
            block = powers[key][:J] @ z
            if not np.all(np.isfinite(block)):
                raise NonFiniteState(f"non-finite state/adjoint after node {i}", node=i)
            sig_b, s_b = decide_rows(block[:, d:])
            same = s_b == s
            if key:
                same &= sig_b == sig
            bad = np.flatnonzero(~same)
            if bad.size == 0:
                Z[i + 1 : i + 1 + J] = block
                i += J
                z = block[-1]
                sig, s = int(sig_b[-1]), float(s_b[-1])
                continue
            j = int(bad[0])
            # node i+j+1 leaves the run; the step into it is still valid
            # unless the active subsystem changed there.
            keep = j if key and sig_b[j] != sig else j + 1
            if keep:
                Z[i + 1 : i + 1 + keep] = block[:keep]
                i += keep
                z = block[keep - 1]
                sig, s = int(sig_b[keep - 1]), float(s_b[keep - 1])
                continue
        Y = (polys[sig] @ z).reshape(5, size)
        z_new = Y[0] + s * (Y[1] + s * (Y[2] + s * (Y[3] + s * Y[4])))
        sig_new, s_new = decide(z_new[d:])
        if sig_new != sig and s > 0.0:
            z_new = _split_lq_cell(problem, z, sig, s, t[i], h, eps, switches)
            sig_new, s_new = decide(z_new[d:])
        Z[i + 1] = z = z_new
        sig, s = sig_new, s_new
        i += 1


def _split_lq_cell(problem, z, sig_a, scale_a, t0, h, eps, switches):
    """Advance ``(x, p)`` across a cell in which the active subsystem changes.

    At ``eps = 0`` the on/off branch is part of the decision, so ``sig = 0``
    and ``scale`` in {0, 1}; with smoothing only the subsystem index counts
    and ``scale`` is frozen at the start of each sub-step.
    """
    d = problem.joint.d
    a = 0.0
    for _ in range(_MAX_SPLITS):
        M = problem.lq_matrix(sig_a, scale_a)
        z_end = rk4_linear_maps(M, h - a)[0] @ z
        if _decide(problem, z_end[d:], eps)[0] == sig_a:
            return z_end
        lo, hi = 0.0, h - a
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            if _decide(problem, (rk4_linear_maps(M, mid)[0] @ z)[d:], eps)[0] == sig_a:
                lo = mid
            else:
                hi = mid
        z = rk4_linear_maps(M, hi)[0] @ z
        a += hi
        switches.append(t0 + a)
        sig_a, _, scale_a = _decide(problem, z[d:], eps)
        if a >= h:
            return z
    return rk4_linear_maps(problem.lq_matrix(sig_a, scale_a), h - a)[0] @ z


def sweep(problem: ShootingProblem, p0, eps: float = 0.0) -> Sweep:
    """Integrate the extremal candidate issued from ``p(0) = p0``."""
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != (problem.joint.d,):
        raise ValidationError(f"p0 must have length {problem.joint.d}")
    if not np.all(np.isfinite(p0)):
        raise NonFiniteState("non-finite initial adjoint", node=0)
    if problem.mode.kind == "lq":
        return _sweep_lq(problem, p0, eps)
    return _sweep_drift(problem, p0, eps)


# -- residuals -------------------------------------------------------------


def residual_reach(p0, problem: ShootingProblem, eps: float = 0.0) -> np.ndarray:
    return sweep(problem, p0, eps).x[-1] - problem.x_hat


def residual_lq(p0, problem: ShootingProblem, eps: float = 0.0) -> np.ndarray:
    sw = sweep(problem, p0, eps)
    return sw.p[-1] + problem.Qhat @ sw.x[-1]


def residual_mayer(p0, problem: ShootingProblem, eps: float = 0.0) -> np.ndarray:
    sw = sweep(problem, p0, eps)
    return sw.p[-1] + problem.Qhat @ (sw.x[-1] - problem.x_hat)


RESIDUALS = {"reach": residual_reach, "lq": residual_lq, "mayer": residual_mayer}


def residual(p0, problem: ShootingProblem, eps: float = 0.0) -> np.ndarray:
    return RESIDUALS[problem.mode.kind](p0, problem, eps)


# -- root finding ----------------------------------------------------------


@dataclass
class SolverConfig:
    """Knobs of the continuation / Levenberg-Marquardt driver.

    ``max_iter`` bounds the Jacobian evaluations of one LM attempt;
    ``multistart`` is the number of perturbed restarts allowed per stage.
    With ``exhaustive=True`` every multistart seed is carried through the
    full continuation and the converged extremal of least cost is kept.
    """

    p0_init: Optional[np.ndarray] = None
    max_iter: int = 60
    residual_tol: float = 5e-4
    fd_step: float = 1e-6
    lm_damping_init: float = 1e-3
    continuation_eps_schedule: Sequence[float] = (1e-1, 1e-2, 1e-3, 0.0)
    multistart: int = 8
    multistart_scale: float = 0.1
    rng_seed: int = 0
    exhaustive: bool = False
    broyden: bool = True
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.residual_tol > 0.0:
            raise ValidationError("residual_tol must be positive")
        sched = [float(e) for e in self.continuation_eps_schedule]
        if not sched or sched[-1] != 0.0:
            raise ValidationError("eps schedule must end at 0")
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValidationError("eps schedule must be strictly decreasing")
        if any(e < 0.0 for e in sched):
            raise ValidationError("eps values must be non-negative")
        self.continuation_eps_schedule = tuple(sched)
        if self.max_iter < 1 or self.multistart < 0:
            raise ValidationError("max_iter must be >= 1 and multistart >= 0")
        if self.p0_init is not None:
            self.p0_init = np.asarray(self.p0_init, dtype=float)


def _thread_count(config):
    if config.threads is not None:
        return max(1, int(config.threads))
    try:
        return max(1, int(os.environ.get("MUXCTL_THREADS", "1")))
    except ValueError:
        return 1


def fd_jacobian(fun: Callable, p0, fd_step: float = 1e-6, threads: int = 1) -> np.ndarray:
    """Central-difference Jacobian, step ``fd_step * max(1, |p0_i|)`` per column."""
    p0 = np.asarray(p0, dtype=float)
    steps = fd_step * np.maximum(1.0, np.abs(p0))

    def column(i):
        e = np.zeros_like(p0)
        e[i] = steps[i]
        try:
            hi, lo = fun(p0 + e), fun(p0 - e)
        except NonFiniteState as exc:
            raise NonFiniteState(f"Jacobian column {i}: {exc}", node=i) from exc
        return (np.asarray(hi) - np.asarray(lo)) / (2.0 * steps[i])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            cols = list(pool.map(column, range(p0.size)))
    else:
        cols = [column(i) for i in range(p0.size)]
    J = np.column_stack(cols)
    if not np.all(np.isfinite(J)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(J), axis=0))[0])
        raise NonFiniteState(f"non-finite Jacobian column {bad}", node=bad)
    return J


def flat_columns(J, tol: float = 1e-12) -> list:
    """Columns of a Jacobian that are numerically zero."""
    return np.flatnonzero(np.max(np.abs(J), axis=0) <= tol).tolist()


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    converged: bool
    iterations: int
    restarts: int
    residual_norm: float = field(init=False)

    def __post_init__(self):
        self.residual_norm = float(np.max(np.abs(self.residual))) if self.residual.size else 0.0


def _safe_eval(fun, x):
    try:
        r = np.asarray(fun(x), dtype=float)
    except NonFiniteState:
        return None
    return r if np.all(np.isfinite(r)) else None


def lm_solve(fun: Callable, config: SolverConfig, p0=None, rng=None) -> LMResult:
    """Damped Levenberg-Marquardt on a square residual with FD Jacobians.

    Converges when ``max |r| <= config.residual_tol``.  Between finite
    difference Jacobians the model is kept current with Broyden rank-one
    updates; a fresh FD Jacobian is taken whenever a Broyden step is
    rejected or fails to halve the residual.  On a
    stall (no acceptable step with a fresh Jacobian, or ``max_iter``
    exhausted) the iterate is replaced by a Gaussian sample around the
    starting point whose scale grows tenfold per restart.  A rank-deficient
    Jacobian (flat region of the thresholded law) perturbs the iterate
    multiplicatively by the next sample instead.  The best iterate seen is
    returned.
    """
    rng = np.random.default_rng(config.rng_seed) if rng is None else rng
    start = np.asarray(config.p0_init if p0 is None else p0, dtype=float)
    threads = _thread_count(config)
    tol = config.residual_tol

    x = start.copy()
    r = _safe_eval(fun, x)
    if r is None:
        raise NonFiniteState("residual not finite at the starting point", node=0)
    best_x, best_r = x.copy(), r.copy()
    total_iters = 0
    restarts = 0
    scale = config.multistart_scale

    def inf(v):
        return float(np.max(np.abs(v)))

    def sample():
        return scale * rng.standard_normal(start.size)

    while True:
        mu = config.lm_damping_init
        stalled = False
        J = None
        for _ in range(config.max_iter):
            if inf(r) <= tol:
                return LMResult(x, r, True, total_iters, restarts)
            total_iters += 1
            if J is None:
                J = fd_jacobian(fun, x, config.fd_step, threads)
                fresh = True
                sv = np.linalg.svd(J, compute_uv=False)
                if sv.size and sv[-1] < 1e-10 and restarts < config.multistart:
                    log.debug("rank-deficient Jacobian (smallest singular value %.3g)", sv[-1])
                    restarts += 1
                    trial = x * (1.0 + sample()) + sample()
                    scale *= 10.0
                    r_trial = _safe_eval(fun, trial)
                    if r_trial is not None:
                        x, r = trial, r_trial
                    J = None
                    continue
            JTJ = J.T @ J
            g = J.T @ r
            diag = np.maximum(np.diag(JTJ), 1e-12 * max(1.0, float(np.max(np.diag(JTJ)))))
            norm_r = float(r @ r)
            accepted = False
            for _ in range(12):
                try:
                    delta = np.linalg.solve(JTJ + mu * np.diag(diag), -g)
                except np.linalg.LinAlgError:
                    delta = np.linalg.lstsq(JTJ + mu * np.diag(diag), -g, rcond=None)[0]
                x_new = x + delta
                r_new = _safe_eval(fun, x_new)
                if r_new is not None and float(r_new @ r_new) < norm_r:
                    accepted = True
                    break
                mu *= 4.0
                if not fresh:
                    break
            if accepted:
                slow = float(r_new @ r_new) > 0.25 * norm_r
                if (slow or not config.broyden) and not fresh:
                    J = None
                else:
                    if config.broyden:
                        J = J + np.outer(r_new - r - J @ delta, delta) / float(delta @ delta)
                    else:
                        J = None
                    fresh = False
                x, r = x_new, r_new
                mu = max(mu / 3.0, 1e-12)
                log.debug("lm iter %d |r|=%.3e mu=%.1e fresh=%s", total_iters, inf(r), mu, fresh)
                if inf(r) < inf(best_r):
                    best_x, best_r = x.copy(), r.copy()
            elif not fresh:
                J = None
            else:
                stalled = True
                break
        else:
            stalled = True
        if inf(r) <= tol:
            return LMResult(x, r, True, total_iters, restarts)
        if not stalled or restarts >= config.multistart:
            break
        restarts += 1
        for _ in range(20):
            x = start + sample() * np.maximum(1.0, np.abs(start))
            r = _safe_eval(fun, x)
            if r is not None:
                break
        else:
            break
        scale *= 10.0
        log.debug("restart %d from perturbed start (scale %.3g)", restarts, scale / 10.0)
    if inf(best_r) <= tol:
        return LMResult(best_x, best_r, True, total_iters, restarts)
    return LMResult(best_x, best_r, False, total_iters, restarts)


# -- driver ----------------------------------------------------------------


@dataclass
class StageRecord:
    eps: float
    converged: bool
    residual_norm: float
    iterations: int
    restarts: int


@dataclass
class SolveReport:
    """Outcome of :func:`solve` with the eps = 0 trajectory and its checks."""

    converged: bool
    residual_norm: float
    iterations: int
    eta_used: int
    p0: np.ndarray
    trajectory: Trajectory
    costs: CostBreakdown
    hamiltonian_spread: float
    hamiltonian_spread_raw: float
    hamiltonian_median: float
    feasibility: MultiplexCheck
    admissibility_violations: list
    l0_loose: np.ndarray
    stages: list = field(default_factory=list)
    extremals: list = field(default_factory=list)
    seed: int = 0
    eps_schedule: tuple = ()
    residual_tol: float = 5e-4
    extras: dict = field(default_factory=dict)


def _riccati_seed_grid(sub, t_hat):
    # only P(0) is needed; the step is set by stiffness, not the shooting grid
    G = sub.B @ np.linalg.solve(sub.R, sub.B.T)
    stiff = np.linalg.norm(G, 2) * max(np.linalg.norm(sub.Qhat, 2), np.linalg.norm(sub.Q, 2) ** 0.5)
    return TimeGrid(t_hat, int(min(100_000, max(1000, math.ceil(2.0 * t_hat * stiff)))))


def default_initial_guess(problem: ShootingProblem) -> np.ndarray:
    """Heuristic ``p(0)`` from the problem data.

    LQ: ``-P_k(0) x_k(0)`` from each subsystem's unconstrained Riccati
    solution.  Mayer: the adjoint of the uncontrolled drift.  Reach: the
    minimum-energy adjoint of the unconstrained transfer.
    """
    joint, grid, kind = problem.joint, problem.grid, problem.mode.kind
    if kind == "lq":
        parts = []
        for sub in joint.subsystems:
            P0 = riccati_solve(sub, _riccati_seed_grid(sub, grid.t_hat)).P[0]
            parts.append(-P0 @ sub.x0)
        return np.concatenate(parts)
    E = expm(joint.A, grid.t_hat)
    if kind == "mayer":
        pT = -problem.Qhat @ (E @ problem.x_bar - problem.x_hat)
        return E.T @ pT
    stack = problem.adjoint_stack
    W = np.einsum("nij,jk,nlk->nil", stack.transpose(0, 2, 1), joint.B @ joint.B.T, stack.transpose(0, 2, 1))
    gram = np.trapezoid(W, dx=grid.step, axis=0)
    target = np.linalg.solve(E, problem.x_hat) - problem.x_bar
    p0 = np.linalg.lstsq(gram, target, rcond=None)[0]
    # only the direction matters for a bang-off-bang law; scale so the
    # strongest switching function reaches twice its threshold
    P = stack @ p0
    peak = max(
        float(np.max(np.abs(P[:, sl] @ sub.B))) / sub.lam for sl, sub in zip(joint.state_slices, joint.subsystems)
    )
    return p0 * (2.0 / peak) if peak > 0.0 else p0


# lambda factors for the LQ seed (Riccati is exact as lambda -> 0) and the
# smoothing ladder for the compact-set seeds
SEED_LAMBDA_LADDER = (1e-4, 1e-3, 1e-2, 3e-2, 0.1, 0.3, 0.6, 1.0)
SEED_EPS_LADDER = (1.0, 0.3, 0.1, 0.03, 0.01, 1e-3, 0.0)


REACH_SEED_QHAT = 100.0


def _lq_relaxation(sub, mode_kind):
    """Unconstrained LQ surrogate of a compact-set subsystem.

    No running state cost, ``R = I`` and the Mayer terminal weight (or a
    quadratic penalty on the target miss for reachability).
    """
    Qhat = sub.Qhat if mode_kind == "mayer" else REACH_SEED_QHAT * np.eye(sub.d)
    # the LQ form only knows the origin as target; shifting by xhat is exact
    # when the target is an equilibrium and a heuristic otherwise
    shift = sub.xhat if sub.xhat is not None else np.zeros(sub.d)
    return LinearSubsystem(
        sub.A,
        sub.B,
        ActionSet.unbounded(sub.m),
        sub.lam,
        Q=np.zeros((sub.d, sub.d)),
        R=np.eye(sub.m),
        Qhat=Qhat,
        x0=sub.x0 - shift,
    )


def decoupled_initial_guess(problem: ShootingProblem, config: Optional["SolverConfig"] = None) -> np.ndarray:
    """Concatenate extremals of the subsystems solved one at a time.

    Without multiplexing each subsystem is a small, well-posed shooting
    problem that can be followed along a homotopy from an exactly solvable
    start.  LQ: a ladder of increasing sparsity weights from the Riccati
    solution.  Reach and Mayer: the same ladder on an unconstrained LQ
    surrogate, then a ladder of decreasing smoothing widths on the actual
    subsystem problem.  The joint solve then only has to resolve conflicts
    between the subsystems' active intervals.  Rungs that fail to converge
    still hand their best iterate on.
    """
    config = config or SolverConfig()
    local = replace(config, multistart=0, p0_init=None)
    kind = problem.mode.kind
    parts = []
    for k, sub in enumerate(problem.joint.subsystems):
        base = sub if kind == "lq" else _lq_relaxation(sub, kind)
        lq_mode = ProblemMode.lq()
        rungs = [(replace(base, lam=base.lam * c), lq_mode, 0.0) for c in SEED_LAMBDA_LADDER]
        if kind != "lq":
            rungs += [(sub, problem.mode, e) for e in SEED_EPS_LADDER]
        p = None
        res = None
        for sub_c, mode, eps in rungs:
            single = ShootingProblem.from_joint(assemble_joint([sub_c]), mode, problem.grid)
            if p is None:
                p = default_initial_guess(single)
            try:
                res = lm_solve(lambda z, pr=single, e=eps: residual(z, pr, e), local, p0=p)
            except NonFiniteState:
                continue
            p = res.x
            log.debug("seed rung k=%d %s lam=%g eps=%g: |r|=%.3g", k + 1, mode.kind, sub_c.lam, eps, res.residual_norm)
        log.info("seed for subsystem %d: |r|=%.3g", k + 1, res.residual_norm if res else float("nan"))
        parts.append(p)
    return np.concatenate(parts)


def build_trajectory(problem: ShootingProblem, p0, eps: float = 0.0) -> Trajectory:
    """Node-sampled trajectory with controls, multiplexer and Hamiltonian."""
    sw = sweep(problem, p0, eps)
    sigma, unit, scale = decide_batch(problem.joint, sw.p, problem.mode, eps)
    traj = Trajectory(problem.grid, sw.x, sw.p, scale[:, None] * unit, sigma, None, sw.switch_times)
    traj.H = hamiltonian_values(traj, problem)
    return traj


def _continuation(problem, config, p_start, rng):
    stages = []
    p = np.asarray(p_start, dtype=float)
    total = 0
    result = None
    schedule = config.continuation_eps_schedule
    for i, eps in enumerate(schedule):
        fun = lambda z, eps=eps: residual(z, problem, eps)  # noqa: E731
        # intermediate stages only produce warm starts; restarts are spent
        # on the exact law
        stage_cfg = config if i == len(schedule) - 1 else replace(config, multistart=0)
        result = lm_solve(fun, stage_cfg, p0=p, rng=rng)
        stages.append(StageRecord(eps, result.converged, result.residual_norm, result.iterations, result.restarts))
        total += result.iterations
        log.info("eps=%g converged=%s |r|=%.3g iters=%d", eps, result.converged, result.residual_norm, result.iterations)
        p = result.x
    return result, stages, total


def make_report(problem, config, p0, result_norm, converged, iterations, stages, extremals=()):
    traj = build_trajectory(problem, p0)
    costs = evaluate_costs(traj, problem)
    trace = hamiltonian_trace(traj, problem)
    report = SolveReport(
        converged=converged,
        residual_norm=result_norm,
        iterations=iterations,
        eta_used=problem.mode.eta,
        p0=np.asarray(p0, dtype=float),
        trajectory=traj,
        costs=costs,
        hamiltonian_spread=trace.relative_spread,
        hamiltonian_spread_raw=trace.spread,
        hamiltonian_median=trace.median,
        feasibility=check_multiplexing(traj, problem.joint.control_slices),
        admissibility_violations=check_admissible(traj, problem.joint),
        l0_loose=np.array([l0_norm(traj.u[:, sl], problem.grid, 1e-4) for sl in problem.joint.control_slices]),
        stages=list(stages),
        extremals=list(extremals),
        seed=config.rng_seed,
        eps_schedule=tuple(config.continuation_eps_schedule),
        residual_tol=config.residual_tol,
    )
    if problem.mode.kind == "lq":
        report.extras["riccati_feedback_sign"] = [
            int(detect_feedback_sign(sub, problem.grid)[0]) for sub in problem.joint.subsystems
        ]
    return report


def _solve_mode(problem, config):
    rng = np.random.default_rng(config.rng_seed)
    start = config.p0_init if config.p0_init is not None else decoupled_initial_guess(problem, config)
    if not config.exhaustive:
        result, stages, iters = _continuation(problem, config, start, rng)
        found = []
        if result.converged:
            found.append((result.x.copy(), evaluate_costs(build_trajectory(problem, result.x), problem).total))
        return result.x, result.residual_norm, result.converged, iters, stages, found
    candidates = []
    starts = [np.asarray(start, dtype=float)]
    base = np.asarray(start, dtype=float)
    scale = config.multistart_scale
    for _ in range(config.multistart):
        starts.append(base + scale * rng.standard_normal(base.size) * np.maximum(1.0, np.abs(base)))
        scale *= 10.0
    single = replace(config, multistart=0)
    best = None
    for s in starts:
        try:
            result, stages, iters = _continuation(problem, single, s, rng)
        except NonFiniteState:
            continue
        if result.converged:
            traj = build_trajectory(problem, result.x)
            total = evaluate_costs(traj, problem).total
            candidates.append((result.x.copy(), total))
        else:
            total = math.inf
        key = (not result.converged, total, result.residual_norm)
        if best is None or key < best[0]:
            best = (key, result, stages, iters)
    if best is None:
        raise NonFiniteState("every multistart diverged")
    _, result, stages, iters = best
    return result.x, result.residual_norm, result.converged, iters, stages, candidates


def solve(problem: ShootingProblem, config: Optional[SolverConfig] = None, strict: bool = True) -> SolveReport:
    """Continuation in ``eps`` followed by an exact (``eps = 0``) shooting solve.

    Reachability problems that fail with ``eta = 1`` are retried in the
    abnormal mode ``eta = 0``.  Raises :class:`NoConvergence` carrying the
    best report unless ``strict`` is false.
    """
    config = config or SolverConfig()
    p, norm, ok, iters, stages, extremals = _solve_mode(problem, config)
    if not ok and problem.mode.kind == "reach" and problem.mode.eta == 1:
        log.info("normal reach solve failed; retrying abnormal branch eta=0")
        abnormal = problem.with_mode(ProblemMode.reach(eta=0))
        p2, norm2, ok2, iters2, stages2, ext2 = _solve_mode(abnormal, config)
        if ok2 or norm2 < norm:
            problem = abnormal
            p, norm, ok, stages, extremals = p2, norm2, ok2, stages + stages2, ext2
        iters += iters2
    report = make_report(problem, config, p, norm, ok, iters, stages, extremals)
    if strict and not ok:
        raise NoConvergence(f"shooting stopped at residual {norm:.3g} > {config.residual_tol:g}", report)
    return report


def simulate_controls(problem: ShootingProblem, U) -> Trajectory:
    """Trajectory driven by given node controls (held over each step).

    The adjoint is integrated backward from the problem's transversality
    condition (LQ, Mayer); reachability has a free adjoint endpoint and
    gets ``p = 0``.  ``sigma`` is read off the control support.
    """
    joint, grid = problem.joint, problem.grid
    n, h, d = grid.n_steps, grid.step, joint.d
    U = np.asarray(U, dtype=float)
    if U.shape != (n + 1, joint.m):
        raise ValidationError(f"controls must have shape ({n + 1}, {joint.m}), got {U.shape}")
    T, SB = problem.state_step
    X = np.empty((n + 1, d))
    X[0] = problem.x_bar
    for i in range(n):
        X[i + 1] = T @ X[i] + SB @ U[i]
    _check_finite(X, "state")
    P = np.zeros_like(X)
    kind = problem.mode.kind
    if kind != "reach":
        P[n] = -problem.Qhat @ (X[n] - (problem.x_hat if kind == "mayer" else 0.0))
        Tb, Sb = rk4_linear_maps(joint.A.T, h)
        Q = problem.Q if kind == "lq" else np.zeros((d, d))
        for i in range(n, 0, -1):
            P[i - 1] = Tb @ P[i] - Sb @ (Q @ (0.5 * (X[i] + X[i - 1])))
        _check_finite(P, "adjoint")
    mask = support_mask(U, joint.control_slices)
    sigma = np.where(mask.any(axis=1), np.argmax(mask, axis=1) + 1, 0)
    traj = Trajectory(grid, X, P, U, sigma)
    traj.H = hamiltonian_values(traj, problem)
    return traj
