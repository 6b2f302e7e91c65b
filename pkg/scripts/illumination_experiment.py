"""Detect on random smooth images under I -> a*I + b and report agreement.

    python scripts/illumination_experiment.py --images 10 --size 64
"""

import argparse
import time

import numpy as np
from scipy.ndimage import gaussian_filter as blur

from sck.detector import DetectorConfig, detect
from sck.evaluation import illumination_harness
from sck.haar import build_haar
from sck.image_io import GrayImage


def random_image(rng, size, sigma):
    a = blur(rng.uniform(0, 255, (size, size)), sigma)
    return GrayImage((a - a.min()) / (a.max() - a.min()) * 255)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--images", type=int, default=10)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--sigma", type=float, default=2.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    d = build_haar(11, 5)
    cfg = DetectorConfig()
    grid = [(a, b) for a in (0.5, 1.3, 2.0) for b in (-20.0, 0.0, 15.0)]
    t0 = time.perf_counter()
    passed, worst = 0, 0.0
    for i in range(args.images):
        img = random_image(rng, args.size, args.sigma)
        base = detect(img, d, cfg)
        for a, b in grid:
            rep = illumination_harness(img, d, cfg, a, b, base=base)
            passed += rep.passed
            worst = max(worst, rep.max_sm_diff)
        print(f"image {i:2d}: {len(base):4d} key-points")
    total = args.images * len(grid)
    print(f"{passed}/{total} cases identical, max |dSM| = {worst:.3e}, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
