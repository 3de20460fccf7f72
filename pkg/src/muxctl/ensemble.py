"""Ensembles of linear time-invariant subsystems and their joint lift.

A :class:`LinearSubsystem` holds one ``(A_k, B_k)`` pair together with its
admissible action set, its sparsity weight and (optionally) quadratic cost
data.  :func:`assemble_joint` stacks ``N`` of them into the block-diagonal
:class:`JointSystem` on which the shooting solver operates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import block_diag

from .errors import (
    DimensionMismatch,
    InvalidMatrix,
    InvalidWeight,
    UnboundedActionSet,
    ZeroNotAdmissible,
)

SYM_TOL = 1e-10


def _as_matrix(M, name):
    M = np.array(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2:
        raise DimensionMismatch(f"{name} must be a matrix, got shape {M.shape}")
    return M


def _symmetrize(M, name, *, positive=False):
    M = _as_matrix(M, name)
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {M.shape}")
    if np.max(np.abs(M - M.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(M))):
        raise InvalidMatrix(f"{name} is not symmetric")
    M = 0.5 * (M + M.T)
    eig = np.linalg.eigvalsh(M)
    if positive and eig.min() <= 0.0:
        raise InvalidMatrix(f"{name} must be positive definite (min eigenvalue {eig.min():g})")
    if not positive and eig.min() < -SYM_TOL:
        raise InvalidMatrix(f"{name} must be non-negative definite (min eigenvalue {eig.min():g})")
    return M


@dataclass(frozen=True, eq=False)
class ActionSet:
    """Admissible control actions of one subsystem.

    Use the constructors :meth:`unbounded`, :meth:`box`, :meth:`interval`
    and :meth:`finite` rather than the raw fields.
    """

    kind: str
    dim: int
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    points: Optional[np.ndarray] = None

    @classmethod
    def unbounded(cls, dim: int) -> "ActionSet":
        return cls("unbounded", int(dim))

    @classmethod
    def box(cls, lower, upper) -> "ActionSet":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise DimensionMismatch("box bounds must be vectors of equal length")
        if np.any(lower > 0.0) or np.any(upper < 0.0):
            raise ZeroNotAdmissible("box bounds must satisfy lower <= 0 <= upper")
        return cls("box", lower.size, lower.copy(), upper.copy())

    @classmethod
    def interval(cls, a: float, b: float) -> "ActionSet":
        return cls.box([a], [b])

    @classmethod
    def finite(cls, points) -> "ActionSet":
        pts = np.array(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise DimensionMismatch("finite action set needs a non-empty list of vectors")
        if not np.any(np.all(pts == 0.0, axis=1)):
            raise ZeroNotAdmissible("finite action set must contain the zero vector")
        return cls("finite", pts.shape[1], points=pts)

    @property
    def compact(self) -> bool:
        return self.kind != "unbounded"

    def require_compact(self):
        if not self.compact:
            raise UnboundedActionSet("this problem class needs a compact action set")

    def argmax_linear(self, c):
        """Maximize ``<c, v>`` over the set.

        Returns ``(v_star, value)``.  Box sets use the vertex rule (zero where
        ``c`` vanishes); finite sets prefer the zero vector among ties, then
        the first listed point.
        """
        V, val = self.argmax_linear_batch(np.asarray(c, dtype=float)[None, :])
        return V[0], float(val[0])

    def argmax_linear_batch(self, C):
        """Row-wise :meth:`argmax_linear` for an ``(n, dim)`` array."""
        self.require_compact()
        C = np.asarray(C, dtype=float)
        if self.kind == "box":
            V = np.where(C > 0.0, self.upper, np.where(C < 0.0, self.lower, 0.0))
            return V, np.einsum("ij,ij->i", C, V)
        vals = C @ self.points.T
        best = vals.max(axis=1)
        is_max = vals == best[:, None]
        zero = np.flatnonzero(np.all(self.points == 0.0, axis=1))[0]
        idx = np.where(is_max[:, zero], zero, np.argmax(is_max, axis=1))
        return self.points[idx], best

    def contains(self, v, tol: float = 1e-9) -> bool:
        v = np.atleast_1d(np.asarray(v, dtype=float))
        if v.shape != (self.dim,):
            return False
        if self.kind == "unbounded":
            return bool(np.all(np.isfinite(v)))
        if self.kind == "box":
            return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))
        return bool(np.any(np.max(np.abs(self.points - v), axis=1) <= tol))


@dataclass(frozen=True, eq=False)
class LinearSubsystem:
    """One member ``x' = A x + B u`` of the ensemble.

    ``Q``, ``R`` are only needed for sparse LQ problems and ``Qhat`` for LQ
    and Mayer problems; ``xhat`` is the target state (reachability, Mayer).
    Cost matrices are symmetrized on construction.
    """

    A: np.ndarray
    B: np.ndarray
    action_set: ActionSet
    lam: float
    Q: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    Qhat: Optional[np.ndarray] = None
    x0: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None
    name: str = ""

    def __post_init__(self):
        set_ = object.__setattr__
        A = _as_matrix(self.A, "A")
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        B = _as_matrix(B, "B")
        if A.shape[0] != A.shape[1]:
            raise DimensionMismatch(f"A must be square, got {A.shape}")
        d, m = A.shape[0], B.shape[1]
        if B.shape[0] != d:
            raise DimensionMismatch(f"B has {B.shape[0]} rows, A has {d}")
        if self.action_set.dim != m:
            raise DimensionMismatch(f"action set dimension {self.action_set.dim} != m_k = {m}")
        if not np.isfinite(self.lam) or self.lam <= 0.0:
            raise InvalidWeight(f"lambda must be positive, got {self.lam}")
        set_(self, "A", A)
        set_(self, "B", B)
        set_(self, "lam", float(self.lam))
        for name, size, positive in (("Q", d, False), ("R", m, True), ("Qhat", d, False)):
            M = getattr(self, name)
            if M is None:
                continue
            M = _symmetrize(M, name, positive=positive)
            if M.shape[0] != size:
                raise DimensionMismatch(f"{name} must be {size}x{size}, got {M.shape}")
            set_(self, name, M)
        x0 = np.zeros(d) if self.x0 is None else np.atleast_1d(np.array(self.x0, dtype=float))
        if x0.shape != (d,):
            raise DimensionMismatch(f"x0 must have length {d}")
        set_(self, "x0", x0)
        if self.xhat is not None:
            xhat = np.atleast_1d(np.array(self.xhat, dtype=float))
            if xhat.shape != (d,):
                raise DimensionMismatch(f"xhat must have length {d}")
            set_(self, "xhat", xhat)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True, eq=False)
class JointSystem:
    """Block-diagonal lift of an ensemble (see :func:`assemble_joint`)."""

    subsystems: tuple
    A: np.ndarray
    B: np.ndarray
    state_slices: tuple
    control_slices: tuple
    lambdas: np.ndarray
    lambda_prime: np.ndarray
    lambda_tilde: float

    @property
    def N(self) -> int:
        return len(self.subsystems)

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def x_bar(self) -> np.ndarray:
        return np.concatenate([s.x0 for s in self.subsystems])

    @property
    def x_hat(self) -> Optional[np.ndarray]:
        if any(s.xhat is None for s in self.subsystems):
            return None
        return np.concatenate([s.xhat for s in self.subsystems])

    def _blkdiag(self, name):
        mats = [getattr(s, name) for s in self.subsystems]
        if any(M is None for M in mats):
            return None
        return block_diag(*mats)

    @property
    def Q(self):
        return self._blkdiag("Q")

    @property
    def R(self):
        return self._blkdiag("R")

    @property
    def Qhat(self):
        return self._blkdiag("Qhat")


def assemble_joint(subsystems: Sequence[LinearSubsystem]) -> JointSystem:
    """Stack subsystems into ``A = blkdiag(A_k)``, ``B = blkdiag(B_k)``.

    Also computes ``lambda_prime[k] = sum of the other weights`` and
    ``lambda_tilde = sum of all weights``.
    """
    subsystems = tuple(subsystems)
    if not subsystems:
        raise DimensionMismatch("an ensemble needs at least one subsystem")
    for s in subsystems:
        if not isinstance(s, LinearSubsystem):
            raise TypeError(f"expected LinearSubsystem, got {type(s).__name__}")
    A = block_diag(*[s.A for s in subsystems])
    B = block_diag(*[s.B for s in subsystems])
    state_slices, control_slices = [], []
    i = j = 0
    for s in subsystems:
        state_slices.append(slice(i, i + s.d))
        control_slices.append(slice(j, j + s.m))
        i += s.d
        j += s.m
    lambdas = np.array([s.lam for s in subsystems])
    lam_tilde = float(lambdas.sum())
    return JointSystem(
        subsystems=subsystems,
        A=A,
        B=B,
        state_slices=tuple(state_slices),
        control_slices=tuple(control_slices),
        lambdas=lambdas,
        lambda_prime=lam_tilde - lambdas,
        lambda_tilde=lam_tilde,
    )


def split_joint(v, offsets: Sequence[slice]) -> list:
    """Cut a stacked vector into per-subsystem pieces."""
    v = np.asarray(v, dtype=float)
    total = offsets[-1].stop if offsets else 0
    if v.ndim != 1 or v.size != total:
        raise DimensionMismatch(f"vector of length {v.size} does not match offsets (total {total})")
    return [v[sl].copy() for sl in offsets]


def stack(pieces) -> np.ndarray:
    """Inverse of :func:`split_joint`."""
    return np.concatenate([np.atleast_1d(np.asarray(p, dtype=float)) for p in pieces])


def cart_pendulum(m: float, M: float, g: float, L: float):
    """Linearized inverted pendulum on a cart, state ``(x, x', theta, theta')``."""
    A = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, -m * g / M, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, (m + M) * g / (L * M), 0.0],
        ]
    )
    B = np.array([[0.0], [1.0 / M], [0.0], [-1.0 / (L * M)]])
    return A, B


def harmonic_oscillator():
    return np.array([[0.0, 1.0], [-1.0, 0.0]]), np.array([[0.0], [1.0]])
