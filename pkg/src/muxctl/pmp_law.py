"""Pointwise Hamiltonian maximizers and the multiplexer selection rule.

For every subsystem the maximum principle produces a *score* (the best value
of that subsystem's summand over its admissible actions, plus the weights of
the subsystems that stay switched off) and a *control law* (the maximizer).
The multiplexer picks the subsystem with the largest score; all other blocks
are zero.

Conventions used throughout:

* subsystem indices ``k`` passed to functions are 0-based;
* multiplexer values ``sigma`` are 1-based, with ``0`` meaning "every control
  block is zero";
* at an exact threshold tie the law returns 0, and among equal scores the
  lowest subsystem index wins.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

from .dynamics import TimeGrid, rk4_integrate
from .errors import FiniteEscape, MissingQ, MissingR, ModeMismatch

KINDS = ("reach", "lq", "mayer")


@dataclass(frozen=True)
class ProblemMode:
    """Problem class plus the abnormal multiplier ``eta``.

    Only reachability problems may be abnormal (``eta=0``); LQ and Mayer
    problems are always normal.
    """

    kind: str
    eta: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.eta not in (0, 1):
            raise ValueError("eta must be 0 or 1")
        if self.kind != "reach" and self.eta != 1:
            raise ModeMismatch(f"{self.kind} problems are always normal (eta=1)")

    @classmethod
    def reach(cls, eta: int = 1):
        return cls("reach", eta)

    @classmethod
    def lq(cls):
        return cls("lq")

    @classmethod
    def mayer(cls):
        return cls("mayer")


# Ramp values below this are flushed to exactly 0 so that the switched-off
# branch is recognizable; the perturbation is below double rounding of u.
RAMP_FLOOR = 1e-15


def ramp(margin, eps):
    s = expit(np.asarray(margin, dtype=float) / eps)
    return np.where(s < RAMP_FLOOR, 0.0, s)


def _rinv(sub):
    if sub.R is None:
        raise MissingR(f"subsystem {sub.name or ''} has no R matrix")
    return np.linalg.inv(sub.R)


# -- reachability / Mayer --------------------------------------------------


def reach_control_k(sub, p_k, eta: int = 1, eps: float = 0.0) -> np.ndarray:
    """Maximizer of ``<B_k^T p_k, v> + eta * lambda_k * 1{v = 0}``.

    With ``eps > 0`` (and ``eta = 1``) the hard threshold is replaced by a
    logistic ramp in ``(max - lambda_k) / eps`` scaling the vertex maximizer.
    """
    sub.action_set.require_compact()
    c = sub.B.T @ np.asarray(p_k, dtype=float)
    v, best = sub.action_set.argmax_linear(c)
    if eta == 0:
        return v
    if eps == 0.0:
        return v if best > sub.lam else np.zeros_like(v)
    return ramp(best - sub.lam, eps) * v


def reach_score_k(joint, k: int, p_k, eta: int = 1) -> float:
    sub = joint.subsystems[k]
    sub.action_set.require_compact()
    _, best = sub.action_set.argmax_linear(sub.B.T @ np.asarray(p_k, dtype=float))
    if eta == 0:
        return best
    if best >= sub.lam:
        return float(joint.lambda_prime[k] + best)
    return joint.lambda_tilde


def mayer_control_k(sub, p_k, eps: float = 0.0) -> np.ndarray:
    return reach_control_k(sub, p_k, eta=1, eps=eps)


def mayer_score_k(joint, k: int, p_k) -> float:
    return reach_score_k(joint, k, p_k, eta=1)


# -- sparse LQ -------------------------------------------------------------


def lq_control_k(sub, p_k, eps: float = 0.0) -> np.ndarray:
    """``R_k^{-1} B_k^T p_k`` when ``||p_k||^2_{B R^-1 B^T} > 2 lambda_k``, else 0."""
    c = sub.B.T @ np.asarray(p_k, dtype=float)
    w = _rinv(sub) @ c
    q = float(c @ w)
    if eps == 0.0:
        return w if q > 2.0 * sub.lam else np.zeros_like(w)
    return ramp(q - 2.0 * sub.lam, eps) * w


def lq_score_k(joint, k: int, p_k) -> float:
    sub = joint.subsystems[k]
    c = sub.B.T @ np.asarray(p_k, dtype=float)
    q = float(c @ _rinv(sub) @ c)
    if q >= 2.0 * sub.lam:
        return float(joint.lambda_prime[k] + 0.5 * q)
    return joint.lambda_tilde


def score_k(joint, k: int, p_k, mode: ProblemMode) -> float:
    if mode.kind == "lq":
        return lq_score_k(joint, k, p_k)
    return reach_score_k(joint, k, p_k, mode.eta)


def select_multiplexer(scores, inactive_level: Optional[float] = None) -> int:
    """Index (1-based) of the largest score, lowest index on ties.

    Returns 0 when ``inactive_level`` is given and no score exceeds it, i.e.
    every subsystem sits on its switched-off branch.
    """
    scores = np.asarray(scores, dtype=float)
    best = int(np.argmax(scores))
    if inactive_level is not None and scores[best] <= inactive_level:
        return 0
    return best + 1


# -- joint law -------------------------------------------------------------


def decide_batch(joint, P, mode: ProblemMode, eps: float = 0.0):
    """Vectorized multiplexer and control decision for rows of adjoints.

    Parameters
    ----------
    P : array, shape (n, d)
        Joint adjoint vectors.

    Returns
    -------
    sigma : int array, shape (n,)
    unit : array, shape (n, m)
        Unscaled control of the selected block (vertex maximizer for compact
        sets, ``R^-1 B^T p`` for LQ); zero outside that block.
    scale : array, shape (n,)
        Multiplier turning ``unit`` into the control.  0/1 at ``eps = 0``,
        a logistic ramp otherwise.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n = P.shape[0]
    N = joint.N
    lq = mode.kind == "lq"
    blocks = []
    margin = np.empty((n, N))
    ramp_arg = np.empty((n, N))
    for k, sub in enumerate(joint.subsystems):
        C = P[:, joint.state_slices[k]] @ sub.B
        if lq:
            W = C @ _rinv(sub)
            q = np.einsum("ij,ij->i", C, W)
            margin[:, k] = 0.5 * q - sub.lam
            ramp_arg[:, k] = q - 2.0 * sub.lam
        else:
            W, best = sub.action_set.argmax_linear_batch(C)
            margin[:, k] = best - sub.lam if mode.eta == 1 else best
            ramp_arg[:, k] = margin[:, k]
        blocks.append(W)
    winner = np.argmax(margin, axis=1)
    rows = np.arange(n)
    top = margin[rows, winner]
    sigma = winner + 1
    if eps == 0.0 or mode.eta == 0:
        sigma = np.where(top > 0.0, sigma, 0)
        scale = (sigma > 0).astype(float)
    else:
        scale = ramp(ramp_arg[rows, winner], eps)
    unit = np.zeros((n, joint.m))
    for k in range(N):
        sel = sigma == k + 1
        if np.any(sel):
            unit[sel, joint.control_slices[k]] = blocks[k][sel]
    return sigma, unit, scale


def joint_control(joint, p, mode: ProblemMode, eps: float = 0.0):
    """Joint control and multiplexer value for one joint adjoint ``p``."""
    sigma, unit, scale = decide_batch(joint, np.asarray(p, dtype=float)[None, :], mode, eps)
    return scale[0] * unit[0], int(sigma[0])


def lq_feedback_blocks(joint):
    """Per-subsystem gains ``K_k`` (m x d) with ``u = K_k p`` on block ``k``."""
    blocks = []
    for k, sub in enumerate(joint.subsystems):
        K = np.zeros((joint.m, joint.d))
        K[joint.control_slices[k], joint.state_slices[k]] = _rinv(sub) @ sub.B.T
        blocks.append(K)
    return blocks


# -- Riccati baseline ------------------------------------------------------


@dataclass
class RiccatiSolution:
    grid: TimeGrid
    P: np.ndarray
    K: np.ndarray


ESCAPE_NORM = 1e12


def riccati_solve(sub, grid: TimeGrid) -> RiccatiSolution:
    """Backward RK4 sweep of ``P' = -A^T P - P A - Q + P B R^-1 B^T P``, ``P(t_hat) = Qhat``.

    ``K[i] = R^-1 B^T P[i]`` are the feedback gains on the nodes.
    """
    if sub.Q is None or sub.Qhat is None:
        raise MissingQ("Riccati sweep needs Q and Qhat")
    Rinv = _rinv(sub)
    A, Q = sub.A, sub.Q
    G = sub.B @ Rinv @ sub.B.T

    def f(t, P):
        if np.max(np.abs(P)) > ESCAPE_NORM:
            raise FiniteEscape(f"Riccati solution escaped near t={t:g}")
        return -A.T @ P - P @ A - Q + P @ G @ P

    P = rk4_integrate(f, sub.Qhat, grid, direction="backward")
    if np.max(np.abs(P)) > ESCAPE_NORM:
        raise FiniteEscape("Riccati solution escaped")
    K = np.einsum("ij,njk->nik", Rinv @ sub.B.T, P)
    return RiccatiSolution(grid, P, K)


def riccati_closed_loop(sub, grid: TimeGrid, sign: float = 1.0):
    """Simulate ``u = sign * R^-1 B^T P(t) x`` from ``sub.x0``.

    ``sign = +1`` is the feedback exactly as printed alongside the Riccati
    equation; :func:`detect_feedback_sign` tells which sign is optimal.

    Returns ``(x, u, cost)`` where ``cost`` is the single-system quadratic
    objective evaluated on the simulated trajectory.  The gain at RK4 half
    steps comes from a Riccati sweep on the doubled grid.
    """
    from .verify import quadratic_cost

    fine = riccati_solve(sub, TimeGrid(grid.t_hat, 2 * grid.n_steps))
    K = sign * fine.K
    A, B = sub.A, sub.B
    n, h = grid.n_steps, grid.step
    x = np.empty((n + 1, sub.d))
    x[0] = sub.x0
    for i in range(n):
        K0, Km, K1 = K[2 * i], K[2 * i + 1], K[2 * i + 2]
        xi = x[i]
        k1 = (A + B @ K0) @ xi
        k2 = (A + B @ Km) @ (xi + 0.5 * h * k1)
        k3 = (A + B @ Km) @ (xi + 0.5 * h * k2)
        k4 = (A + B @ K1) @ (xi + h * k3)
        x[i + 1] = xi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    u = np.einsum("nij,nj->ni", K[::2], x)
    cost = quadratic_cost(sub.Q, sub.R, sub.Qhat, grid, x, u)
    return x, u, cost


def detect_feedback_sign(sub, grid: TimeGrid):
    """Which sign of ``u = +-R^-1 B^T P x`` gives the lower quadratic cost.

    Returns ``(sign, {+1: cost, -1: cost})``.
    """
    costs = {s: riccati_closed_loop(sub, grid, s)[2] for s in (+1.0, -1.0)}
    sign = min(costs, key=lambda s: costs[s])
    return sign, costs
