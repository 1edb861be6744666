"""Synthetic stand-in for the laboratory-data experiment.

One and two homogeneous rods with purely real contrast.  CSI runs with the
contrast-adaptive weight; ACG and PCG run with a fixed weight, taken either
as the last CSI weight or as the heuristic 0.01.  Writes lab_like.csv and
one contrast file per run.

    python3 scripts/lab_like_study.py [output_dir]     # about 15 minutes
"""

import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from mwtomo.inversion import InversionOptions
from mwtomo.io import write_contrast
from mwtomo.studies import ExperimentConfig, build_problem, invert

SETUP = {"grid_side": 32, "num_emitters": 32, "num_receivers": 32}
BASE = InversionOptions(lambda_reg=0.001, max_outer=300)


def run(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for phantom in ("one-cylinder", "two-cylinders"):
        problem = build_problem(ExperimentConfig.from_dict({"setup": SETUP, "phantom": phantom}))
        csi = invert(problem, replace(BASE, algorithm="csi", lam="csi"))
        lam_end = csi.final.lam
        runs = {"csi": csi}
        for algo in ("acg-csi", "simultaneous-pcg"):
            for tag, lam in (("lam_csi", lam_end), ("lam_0.01", 0.01)):
                runs[f"{algo}_{tag}"] = invert(problem, replace(BASE, algorithm=algo, lam=float(lam)))
        for name, res in runs.items():
            write_contrast(out / f"{phantom}_{name}.contrast", res.x)
            imag = float(np.max(np.abs(res.x.imag)))
            rows.append((phantom, name, res.final.lam, res.final.F, res.final.mse, res.final.op_count, imag))
            print(f"{phantom:14s} {name:28s} lambda {res.final.lam:.3e}  delta_x {res.final.mse:.3f}  "
                  f"ops {res.final.op_count:6d}  max|Im x| {imag:.3f}", flush=True)
    with open(out / "lab_like.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["phantom", "run", "lambda", "final_F", "delta_x", "op_count", "max_abs_imag_x"])
        w.writerows(rows)


if __name__ == "__main__":
    run(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/lab_like"))
