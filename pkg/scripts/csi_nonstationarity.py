"""Exact gradient norm along CSI runs: approximate vs exact gradients.

Writes csi_gradients.csv with one column per variant, so the stall of the
approximate-gradient run can be plotted against the fixed-weight reference.

    python3 scripts/csi_nonstationarity.py [grid_side] [iterations] [output.csv]
"""

import csv
import sys

from mwtomo.inversion import InversionOptions, run_inversion
from mwtomo.model import ImagingSetup, add_noise, build_grid, build_operators, forward_solve, make_phantom

VARIANTS = {
    "adaptive_approx": dict(lam="csi", gradient_mode="csi-approx"),
    "adaptive_exact": dict(lam="csi", gradient_mode="exact"),
    "fixed_exact": dict(lam=0.01, gradient_mode="exact"),
}


def main(ns=32, iters=500, path="csi_gradients.csv"):
    setup = ImagingSetup(grid_side=ns, num_emitters=ns, num_receivers=ns)
    grid = build_grid(setup)
    ops = build_operators(setup, grid)
    truth = make_phantom("small-square", grid)
    data = add_noise(forward_solve(truth, ops)[1], 20.0, setup.seed)
    cols = {}
    for name, kw in VARIANTS.items():
        opts = InversionOptions(algorithm="csi", lambda_reg=0.001, max_outer=iters, f_rel_floor=0, **kw)
        _, tr = run_inversion(ops, data, opts, truth=truth)
        g = tr.column("grad_x_norm")
        cols[name] = g
        tail = g[int(0.8 * iters):]
        print(f"{name:16s} |grad| start {g[0]:.3e}  last-20% min {tail.min():.3e}  "
              f"({tail.min() / g[0]:.1e} of start)  delta_x {tr.rows[-1].mse:.3f}")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", *cols])
        for k in range(iters + 1):
            w.writerow([k, *("%.17g" % cols[c][k] for c in cols)])


if __name__ == "__main__":
    a = sys.argv[1:]
    main(int(a[0]) if a else 32, int(a[1]) if len(a) > 1 else 500, a[2] if len(a) > 2 else "csi_gradients.csv")
