"""Bang-off-bang multiplexed control with bounded inputs.

The same pair of plants as the LQ demo, now with |u| <= 1 and only a
terminal penalty.  Prints the switching pattern of each controller and
compares its active time with the LQ solution.

    python demos/mayer_benchmark.py
"""

import numpy as np

from muxctl import cli
from muxctl.verify import l0_norm


def switch_pattern(u, t):
    levels = np.round(u).astype(int)
    cuts = np.flatnonzero(np.diff(levels)) + 1
    starts = np.concatenate([[0], cuts])
    return " ".join(f"{levels[s]:+d}@{t[s]:.3f}" for s in starts)


def main():
    runs = {}
    for name in ("paper_mayer", "paper_lq"):
        report, problem, secs = cli.solve_config(cli.load_config(name))
        runs[name] = (report, problem)
        print(f"{name}: converged={report.converged} residual={report.residual_norm:.3g} ({secs:.1f} s)")

    report, problem = runs["paper_mayer"]
    t = report.trajectory.t
    for k, sl in enumerate(problem.joint.control_slices, start=1):
        print(f"u_{k}: {switch_pattern(report.trajectory.u[:, sl].ravel(), t)}")

    for name, (rep, pr) in runs.items():
        active = sum(l0_norm(rep.trajectory.u[:, sl], pr.grid, 1e-4) for sl in pr.joint.control_slices)
        print(f"{name}: total active time {active:.3f} s, terminal cost {rep.costs.terminal:.4g}")


if __name__ == "__main__":
    main()
