"""Which sign of the Riccati feedback actually minimizes the LQ cost.

With ``P`` from the backward Riccati sweep, the feedback can be written
``u = +R^-1 B^T P x`` or ``u = -R^-1 B^T P x``.  This simulates both for the
two benchmark plants and compares the resulting quadratic costs.

    python demos/riccati_sign.py
"""

from muxctl import cli
from muxctl.pmp_law import detect_feedback_sign


def main():
    cfg = cli.load_config("paper_lq")
    grid = cfg.grid
    for sub in cfg.subsystems:
        sign, costs = detect_feedback_sign(sub, grid)
        print(f"{sub.name or 'subsystem'}: cost with +1 = {costs[1.0]:.4g}, with -1 = {costs[-1.0]:.4g} -> use {int(sign):+d}")


if __name__ == "__main__":
    main()
