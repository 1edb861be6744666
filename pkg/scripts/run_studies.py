"""Run every example configuration through the command-line entry point.

    python3 scripts/run_studies.py [output_root]
"""

import sys
from pathlib import Path

from mwtomo.cli import main

HERE = Path(__file__).parent
JOBS = [
    ("invert", "invert_small.json"),
    ("degeneracy-demo", "degeneracy.json"),
    ("lambda-sweep", "lambda_sweep.json"),
    ("reg-study", "reg_study.json"),
    ("race", "race.json"),
]


def run_all(root: Path) -> int:
    worst = 0
    for cmd, cfg in JOBS:
        out = root / cmd
        print(f"== {cmd} -> {out}", flush=True)
        code = main(["-v", cmd, "--config", str(HERE / "configs" / cfg), "--output", str(out)])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(run_all(Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs")))
