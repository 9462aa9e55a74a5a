#!/usr/bin/env python3
"""Run all three accuracy-vs-epsilon studies on one or both datasets.

Fetches the data if needed, reuses trained models across figures through a
shared on-disk cache, and writes results/<figure>/<dataset>/{data.csv,
plot.svg, config.txt}.
"""

import argparse
import os
import sys
import time

from stucknet.data import default_manifest, fetch_dataset
from stucknet.harness import ModelCache, reproduce


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--datasets", nargs="+", default=["fashion-mnist"],
                    choices=["fashion-mnist", "mnist"])
    ap.add_argument("--data-dir", default="data")
    ap.add_argument("--out", default="results")
    ap.add_argument("--cache-dir", default="results/models")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--realizations", type=int, default=5)
    ap.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    args = ap.parse_args()

    cache = ModelCache(args.cache_dir)
    for dataset in args.datasets:
        fetch_dataset(default_manifest(dataset, args.data_dir))
        for figure in ("fig3", "fig4", "fig5"):
            t0 = time.time()
            paths = reproduce(
                figure, dataset, out_root=args.out, data_dir=args.data_dir,
                seed=args.seed, n_realizations=args.realizations,
                workers=args.workers, cache=cache,
                log_fn=lambda e, l: print(f"  epoch {e + 1}: loss {l:.4f}"),
            )
            print(f"{figure}/{dataset} done in {time.time() - t0:.1f}s")
            for p in paths.values():
                print(f"  {p}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
