"""Repeatability and matching score on synthetic image pairs.

Each pair is a textured image and its warp under a known homography; warped
pixels without a source are excluded from the common region.

    python scripts/repeatability_experiment.py --size 128 --topk 1000
"""

import argparse
import math

import numpy as np
from scipy.ndimage import gaussian_filter as blur

from sck.detector import DetectorConfig, detect
from sck.evaluation import Homography, matching_score, warp_image
from sck.haar import build_haar
from sck.image_io import GrayImage


def transforms(size):
    c = (size - 1) / 2
    return {
        "translate(5,5)": Homography.translation(5, 5),
        "translate(2.5,0)": Homography.translation(2.5, 0),
        "rotate 10deg": Homography.rotation(math.radians(10), c, c),
        "rotate 90deg": Homography([[0, -1, size - 1], [1, 0, 0], [0, 0, 1]]),
        "scale 1.2": Homography([[1.2, 0, -0.2 * c], [0, 1.2, -0.2 * c], [0, 0, 1]]),
        "perspective": Homography([[1.0, 0.05, 0], [0.02, 1.0, 0], [2e-4, 1e-4, 1]]),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--sigma", type=float, default=1.5)
    ap.add_argument("--topk", type=int, default=1000)
    ap.add_argument("--lam", type=float, default=0.15)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    a = blur(rng.uniform(0, 255, (args.size, args.size)), args.sigma)
    img = GrayImage((a - a.min()) / (a.max() - a.min()) * 255)
    d = build_haar(11, 5)
    cfg = DetectorConfig(lam=args.lam, max_keypoints=args.topk)
    ka = detect(img, d, cfg)
    print(f"{'transform':18s} {'#A':>5s} {'#B':>5s} {'denom':>6s} {'repeat':>7s} {'match':>7s}")
    for name, H in transforms(args.size).items():
        warped, valid = warp_image(img, H, return_mask=True)
        kb = detect(warped, d, cfg)
        res = matching_score(ka, kb, H, img, warped, mask_b=valid)
        print(f"{name:18s} {len(ka):5d} {len(kb):5d} {res.denominator:6d} "
              f"{res.repeatability:7.3f} {res.matching_score:7.3f}")


if __name__ == "__main__":
    main()
