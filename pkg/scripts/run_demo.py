"""End-to-end synthetic census: synth -> calibrate -> aggregate -> Moran -> ridge.

    python scripts/run_demo.py --seed 1 [--zips 100] [--images-per-zip 120]
"""
import argparse
import time

from carcensus.pipeline import run_demo
from carcensus.synth import SyntheticCityConfig, synth_city


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--zips", type=int, default=100)
    p.add_argument("--images-per-zip", type=int, default=120)
    p.add_argument("--coupling", type=float, default=1.5)
    p.add_argument("--permutations", type=int, default=999)
    args = p.parse_args()

    t0 = time.perf_counter()
    city = synth_city(SyntheticCityConfig(n_zips=args.zips, images_per_zip=args.images_per_zip,
                                          price_income_coupling=args.coupling, seed=args.seed))
    print(f"synth: {len(city.images)} images, {len(city.detections)} detections")
    result = run_demo(args.seed, city, permutations=args.permutations)
    for line in result.lines():
        print(line)
    print(f"elapsed={time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
