"""Costs, sparsity measures and necessary-condition checks for trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ZERO_TOL = 1e-9


@dataclass
class CostBreakdown:
    l0_per_subsystem: np.ndarray
    weighted_l0: float
    quadratic_running: float
    terminal: float
    total: float


@dataclass
class MultiplexCheck:
    passed: bool
    violations: list = field(default_factory=list)

    def __bool__(self):
        return self.passed


@dataclass
class HamiltonianTrace:
    values: np.ndarray
    median: float
    spread: float
    relative_spread: float
    excluded: np.ndarray


def _block_active(u_block, zero_tol):
    u_block = np.asarray(u_block, dtype=float)
    if u_block.ndim == 1:
        u_block = u_block[:, None]
    return np.max(np.abs(u_block), axis=1) > zero_tol


def l0_norm(u_k, grid, zero_tol: float = ZERO_TOL) -> float:
    """Measure of the support of a node-sampled control.

    Cell ``[t_i, t_{i+1})`` counts as active when the control at its left
    node exceeds ``zero_tol`` in the max-norm.
    """
    active = _block_active(u_k, zero_tol)[: grid.n_steps]
    return float(np.count_nonzero(active) * grid.step)


def support_mask(u, control_slices, zero_tol: float = ZERO_TOL) -> np.ndarray:
    """Boolean ``(n_nodes, N)`` array of non-zero control blocks."""
    return np.column_stack([_block_active(u[:, sl], zero_tol) for sl in control_slices])


def joint_off_measure(u, grid, control_slices, zero_tol: float = ZERO_TOL) -> float:
    """Measure of the cells in which every control block is zero."""
    off = ~support_mask(u, control_slices, zero_tol).any(axis=1)
    return float(np.count_nonzero(off[: grid.n_steps]) * grid.step)


def check_multiplexing(traj, control_slices, zero_tol: float = ZERO_TOL) -> MultiplexCheck:
    """At most one block non-zero per node, and it must be the block ``sigma`` names."""
    mask = support_mask(traj.u, control_slices, zero_tol)
    n_active = mask.sum(axis=1)
    bad = n_active > 1
    if traj.sigma is not None:
        sigma = np.asarray(traj.sigma)
        owner = np.argmax(mask, axis=1) + 1
        bad |= (n_active == 1) & (owner != sigma)
    violations = np.flatnonzero(bad).tolist()
    return MultiplexCheck(not violations, violations)


def check_admissible(traj, joint, tol: float = 1e-9) -> list:
    """Nodes where some control block leaves its action set."""
    bad = []
    for i, row in enumerate(traj.u):
        for k, sub in enumerate(joint.subsystems):
            if not sub.action_set.contains(row[joint.control_slices[k]], tol):
                bad.append(i)
                break
    return bad


def quadratic_cost(Q, R, Qhat, grid, x, u) -> float:
    """``1/2 int (x'Qx + u'Ru) dt + 1/2 x(T)' Qhat x(T)`` with the trapezoid rule."""
    run = 0.5 * (np.einsum("ni,ij,nj->n", x, Q, x) + np.einsum("ni,ij,nj->n", u, R, u))
    return float(np.trapezoid(run, dx=grid.step) + 0.5 * x[-1] @ Qhat @ x[-1])


def _indicators(u, joint, zero_tol):
    return ~support_mask(u, joint.control_slices, zero_tol)


def hamiltonian_values(traj, problem, zero_tol: float = ZERO_TOL) -> np.ndarray:
    joint, mode = problem.joint, problem.mode
    x, p, u = traj.x, traj.p, traj.u
    H = np.einsum("ni,ni->n", p, x @ joint.A.T + u @ joint.B.T)
    H = H + mode.eta * (_indicators(u, joint, zero_tol) @ joint.lambdas)
    if mode.kind == "lq":
        H -= 0.5 * (np.einsum("ni,ij,nj->n", x, problem.Q, x) + np.einsum("ni,ij,nj->n", u, problem.R, u))
    return H


def switch_nodes(traj, control_slices, zero_tol: float = ZERO_TOL) -> np.ndarray:
    """Left nodes of cells in which the multiplexer or a block's support changes."""
    mask = support_mask(traj.u, control_slices, zero_tol)
    change = np.any(mask[1:] != mask[:-1], axis=1)
    if traj.sigma is not None:
        change |= np.asarray(traj.sigma)[1:] != np.asarray(traj.sigma)[:-1]
    nodes = set(np.flatnonzero(change).tolist())
    h = traj.grid.step
    for ts in traj.switch_times or ():
        nodes.add(min(int(ts // h), traj.grid.n_steps - 1))
    return np.array(sorted(nodes), dtype=int)


def hamiltonian_trace(traj, problem, guard: int = 2, zero_tol: float = ZERO_TOL) -> HamiltonianTrace:
    """Hamiltonian along the trajectory and its deviation from a constant.

    ``spread`` is ``max |H_i - median(H)|`` over nodes further than ``guard``
    nodes from any detected switch; ``relative_spread`` divides it by
    ``1 + |median|``.
    """
    H = hamiltonian_values(traj, problem, zero_tol)
    excluded = np.zeros(H.size, dtype=bool)
    for i in switch_nodes(traj, problem.joint.control_slices, zero_tol):
        excluded[max(0, i - guard + 1) : i + guard + 1] = True
    kept = H[~excluded] if np.any(~excluded) else H
    med = float(np.median(kept))
    spread = float(np.max(np.abs(kept - med)))
    return HamiltonianTrace(H, med, spread, spread / (1.0 + abs(med)), excluded)


def evaluate_costs(traj, problem, zero_tol: float = ZERO_TOL) -> CostBreakdown:
    """Objective pieces of the trajectory for the problem's class.

    ``total`` is ``quadratic_running + weighted_l0 + terminal``, i.e. the
    weighted-support form of the objective; it differs from the integral
    form with negative indicator terms by the constant ``lambda_tilde * t_hat``.
    """
    joint, mode, grid = problem.joint, problem.mode, traj.grid
    l0 = np.array([l0_norm(traj.u[:, sl], grid, zero_tol) for sl in joint.control_slices])
    weighted = float(joint.lambdas @ l0)
    running = terminal = 0.0
    xT = traj.x[-1]
    if mode.kind == "lq":
        run = 0.5 * (
            np.einsum("ni,ij,nj->n", traj.x, problem.Q, traj.x)
            + np.einsum("ni,ij,nj->n", traj.u, problem.R, traj.u)
        )
        running = float(np.trapezoid(run, dx=grid.step))
        terminal = float(0.5 * xT @ problem.Qhat @ xT)
    elif mode.kind == "mayer":
        e = xT - problem.x_hat
        terminal = float(0.5 * e @ problem.Qhat @ e)
    return CostBreakdown(l0, weighted, running, terminal, running + weighted + terminal)
