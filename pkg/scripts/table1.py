"""Six-scheme comparison at desk scale, printed as a privacy/utility table.

    python scripts/table1.py --config configs/desk.cfg --out results.csv
"""

import argparse
import os
import time

from fedshade import harness
from fedshade.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk.cfg")
    ap.add_argument("--out", default="results.csv")
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    config = load_config(args.config)
    t0 = time.perf_counter()
    rows, failures = harness.run_comparison(config, out=args.out, cell_workers=args.workers)
    print(harness.format_summary(harness.summary_rows(rows)))
    print(f"\n{len(config.schemes)} schemes x {len(config.seeds)} seeds in {time.perf_counter() - t0:.0f}s")
    for scheme, seed, msg in failures:
        print(f"failed: {scheme} seed {seed}: {msg}")


if __name__ == "__main__":
    main()
