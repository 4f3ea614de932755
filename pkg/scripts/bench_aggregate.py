"""Aggregation throughput on a synthetic detection file (single process).

    python scripts/bench_aggregate.py [--records 300000] [--threads 1]
"""
import argparse
import tempfile
import time
from pathlib import Path

import numpy as np

from carcensus import ingest
from carcensus.cli import aggregate_file
from carcensus.synth import synth_detections, synth_taxonomy


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--records", type=int, default=300_000)
    p.add_argument("--images", type=int, default=60_000)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    args = p.parse_args()

    batch = synth_detections(args.records, args.images, seed=0)
    table = synth_taxonomy(400, 71, np.random.default_rng(0))
    regions = {f"I{i:07d}": f"Z{i % 100:05d}" for i in range(args.images)}
    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "det.tsv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            ingest.write_detections(batch, f)
        size = path.stat().st_size
        for rep in range(args.repeats):
            t0 = time.perf_counter()
            aggregate_file(path, regions, table, threads=args.threads)
            dt = time.perf_counter() - t0
            print(f"run={rep} seconds={dt:.3f} records_per_s={args.records / dt:,.0f} "
                  f"mb_per_s={size / dt / 1e6:.1f} per_core={args.records / dt / args.threads:,.0f}")


if __name__ == "__main__":
    main()
