"""Sparse multiplexed LQ control of an oscillator and a cart-pendulum.

Solves the bundled ``paper_lq`` config and prints when each controller is
active and where both are idle.  Run from the repository root:

    python demos/lq_benchmark.py
"""

import numpy as np

from muxctl import cli


def intervals(mask, t):
    """Maximal runs of ``mask`` as (start, end) times."""
    edges = np.flatnonzero(np.diff(np.concatenate([[0], mask.astype(int), [0]])))
    return [(t[a], t[min(b, t.size - 1)]) for a, b in zip(edges[::2], edges[1::2])]


def main():
    cfg = cli.load_config("paper_lq")
    report, problem, secs = cli.solve_config(cfg)
    traj = report.trajectory
    print(f"converged={report.converged} residual={report.residual_norm:.3g} in {secs:.1f} s")

    t = traj.t
    for k, sl in enumerate(problem.joint.control_slices, start=1):
        on = np.any(np.abs(traj.u[:, sl]) > 1e-4, axis=1)
        spans = ", ".join(f"[{a:.3f}, {b:.3f}]" for a, b in intervals(on, t))
        print(f"u_{k} active on {spans}")
    idle = np.all(np.abs(traj.u) <= 1e-4, axis=1)
    print("both idle on " + ", ".join(f"[{a:.3f}, {b:.3f}]" for a, b in intervals(idle, t)))

    xT = traj.x[-1]
    print(f"oscillator x(T) = ({xT[0]:.4f}, {xT[1]:.4f})")
    print(f"pendulum theta(T) = {xT[4]:.3g}, theta'(T) = {xT[5]:.3g}")
    c = report.costs
    print(f"cost: sparsity {c.weighted_l0:.4f} + running {c.quadratic_running:.4f} + terminal {c.terminal:.4f} = {c.total:.4f}")
    print(f"Hamiltonian relative spread {report.hamiltonian_spread:.3g}")


if __name__ == "__main__":
    main()
