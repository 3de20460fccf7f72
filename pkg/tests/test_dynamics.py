import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from muxctl.dynamics import (
    TimeGrid,
    expm,
    propagate_adjoint_closed_form,
    rk4_integrate,
    rk4_linear_maps,
)
from muxctl.ensemble import harmonic_oscillator
from muxctl.errors import ModeMismatch, NonFiniteState
from muxctl.pmp_law import ProblemMode

A_OSC = harmonic_oscillator()[0]


def test_grid_nodes():
    g = TimeGrid(3.5, 4000)
    t = g.nodes
    assert t.size == 4001 and t[0] == 0.0 and t[-1] == 3.5
    assert np.allclose(np.diff(t), g.step, rtol=0, atol=1e-15)


@pytest.mark.parametrize("t_hat,n", [(0.0, 10), (-1.0, 10), (1.0, 0), (1.0, 2.5)])
def test_grid_rejects_bad_input(t_hat, n):
    with pytest.raises(ValueError):
        TimeGrid(t_hat, n)


# -- rk4_integrate --------------------------------------------------------------


def test_zero_field_is_constant():
    z = rk4_integrate(lambda t, z: np.zeros_like(z), [1.0, -2.0], TimeGrid(1.0, 50))
    assert np.all(z == [1.0, -2.0])


def test_exponential_growth():
    z = rk4_integrate(lambda t, z: z, [1.0], TimeGrid(1.0, 1000))
    assert abs(z[-1, 0] - math.e) <= 1e-9


def test_oscillator_full_period():
    x = rk4_integrate(lambda t, z: A_OSC @ z, [1.0, 0.0], TimeGrid(2 * math.pi, 4000))
    assert np.max(np.abs(x[-1] - [1.0, 0.0])) <= 1e-6


def test_backward_sweep_inverts_forward():
    g = TimeGrid(1.0, 1000)
    z = rk4_integrate(lambda t, z: z, [math.e], g, direction="backward")
    assert abs(z[0, 0] - 1.0) <= 1e-9
    assert z[-1, 0] == math.e


def test_time_dependent_field():
    # z' = t, z(0) = 0 -> t^2 / 2, integrated exactly by RK4
    z = rk4_integrate(lambda t, z: np.array([t]), [0.0], TimeGrid(2.0, 7))
    assert np.allclose(z[:, 0], TimeGrid(2.0, 7).nodes ** 2 / 2, atol=1e-14)


def test_nonfinite_state_reports_node():
    with pytest.raises(NonFiniteState) as info:
        rk4_integrate(lambda t, z: np.array([np.inf]) if t > 0.5 else z, [1.0], TimeGrid(1.0, 10))
    assert info.value.node is not None and 5 <= info.value.node <= 7


def test_nonfinite_initial_value():
    with pytest.raises(NonFiniteState):
        rk4_integrate(lambda t, z: z, [np.nan], TimeGrid(1.0, 10))


def test_bad_direction():
    with pytest.raises(ValueError):
        rk4_integrate(lambda t, z: z, [1.0], TimeGrid(1.0, 10), direction="sideways")


def test_fourth_order_convergence():
    errs = []
    for n in (200, 400):
        x = rk4_integrate(lambda t, z: A_OSC @ z, [1.0, 0.0], TimeGrid(2 * math.pi, n))
        errs.append(np.max(np.abs(x[-1] - [1.0, 0.0])))
    assert errs[0] / errs[1] >= 12.0


def test_linear_maps_match_rk4_step():
    rng = np.random.default_rng(1)
    M = rng.normal(size=(3, 3))
    b = rng.normal(size=3)
    z0 = rng.normal(size=3)
    T, S = rk4_linear_maps(M, 0.01)
    z = rk4_integrate(lambda t, z: M @ z + b, z0, TimeGrid(0.01, 1))
    assert np.allclose(T @ z0 + S @ b, z[-1], rtol=0, atol=1e-14)


# -- expm ------------------------------------------------------------------------


def test_expm_zero():
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))


def test_expm_rotation():
    # -A^T = A for the oscillator; a quarter turn maps (1, 0) to (0, -1)
    E = expm(-A_OSC.T, math.pi / 2)
    assert np.allclose(E @ [1.0, 0.0], [0.0, -1.0], atol=1e-14)


def test_expm_diagonal():
    E = expm(np.diag([0.3, -2.0]), 1.7)
    assert np.allclose(E, np.diag(np.exp([0.51, -3.4])), rtol=1e-14, atol=0)


def test_expm_rejects_nonsquare_and_nonfinite():
    with pytest.raises(Exception):
        expm(np.ones((2, 3)))
    with pytest.raises(NonFiniteState):
        expm(np.array([[np.nan]]))


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 8.0), st.integers(0, 2**32 - 1))
def test_expm_matches_reference(d, norm, seed):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    M *= norm / np.linalg.norm(M, 2)
    ref = scipy.linalg.expm(M)
    assert np.linalg.norm(expm(M) - ref) <= 1e-10 * np.linalg.norm(ref)


# -- closed-form adjoint -----------------------------------------------------------


def test_adjoint_zero():
    P = propagate_adjoint_closed_form(A_OSC, np.zeros(2), TimeGrid(1.0, 10))
    assert np.all(P == 0.0)


def test_adjoint_oscillator_quarter_turn():
    P = propagate_adjoint_closed_form(A_OSC, [1.0, 0.0], TimeGrid(math.pi / 2, 100))
    assert np.allclose(P[-1], [0.0, -1.0], atol=1e-13)


def test_adjoint_double_integrator():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    g = TimeGrid(2.0, 20)
    t = g.nodes
    P = propagate_adjoint_closed_form(A, [1.0, 0.0], g)
    assert np.allclose(P, np.column_stack([np.ones_like(t), -t]), atol=1e-14)
    P = propagate_adjoint_closed_form(A, [0.0, 1.0], g)
    assert np.allclose(P, [[0.0, 1.0]] * t.size, atol=1e-14)


def test_adjoint_refuses_lq():
    with pytest.raises(ModeMismatch):
        propagate_adjoint_closed_form(A_OSC, [1.0, 0.0], TimeGrid(1.0, 10), mode=ProblemMode.lq())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.floats(0.1, 20.0), st.integers(2000, 4000), st.integers(0, 2**32 - 1))
def test_adjoint_closed_form_matches_rk4(d, norm_t, n, seed):
    # ||A|| * t_hat <= 20; the error is measured relative to the adjoint's size
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(d, d))
    A *= norm_t / np.linalg.norm(A, 2)
    p0 = rng.normal(size=d)
    g = TimeGrid(1.0, n)
    closed = propagate_adjoint_closed_form(A, p0, g)
    numeric = rk4_integrate(lambda t, p: -A.T @ p, p0, g)
    assert np.max(np.abs(closed - numeric)) <= 1e-8 * max(1.0, np.max(np.abs(closed)))
