"""Seed-averaged per-round validation dB and cumulative privacy RMSE from a results CSV.

    python scripts/round_curves.py results.csv
"""

import sys
from collections import defaultdict

import numpy as np

from fedshade.harness import ERROR_MARKER, read_csv


def _mean(values):
    finite = values[np.isfinite(values)]
    return float(finite.mean()) if finite.size else float("nan")


def main(path):
    cells = defaultdict(lambda: defaultdict(list))
    for rec in read_csv(path):
        if rec["round"] == ERROR_MARKER:
            continue
        r = int(rec["round"])
        val = float("nan") if rec["val_mse_db"] == "NA" else float(rec["val_mse_db"])
        rmse = float("nan") if rec["privacy_rmse_m"] == "NA" else float(rec["privacy_rmse_m"])
        cells[rec["scheme"]][r].append((val, rmse))
    for scheme, rounds in cells.items():
        print(f"\n{scheme}")
        print(f"{'round':>5} {'val dB':>9} {'RMSE m':>8}")
        for r in sorted(rounds):
            v, p = (_mean(col) for col in np.array(rounds[r]).T)
            print(f"{r:>5} {v:>9.2f} {p:>8.2f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "results.csv")
