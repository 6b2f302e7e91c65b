"""Exit criteria. Each test prints one PASS/FAIL line (collected in the summary)."""

import math
import os
import subprocess
import sys
import time

import numpy as np

from oracles import (
    kkt_residual,
    lasso_reference,
    nms_brute_force,
    objective,
    rank_by_elimination,
    smooth_image,
)
from sck.cli import main
from sck.detector import DetectorConfig, KeyPoint, detect, nms
from sck.evaluation import Homography, matching_score, repeatability
from sck.haar import Dictionary, build_haar, rank
from sck.image_io import GrayImage, save_image
from sck.lasso import SolverParams, soft_threshold, solve_lasso

HAAR11 = build_haar(11, 5)


def test_1_illumination_invariance(tmp_path, acceptance, capsys):
    rng = np.random.default_rng(2024)
    paths = []
    for i in range(20):
        p = tmp_path / f"img{i:02d}.pgm"
        save_image(GrayImage(smooth_image(rng, 64, 64, 2.0)), p)
        paths.append(p)
    start = time.perf_counter()
    failures = []
    cases = 0
    for p in paths:
        for a in (0.5, 1.3, 2.0):
            for b in (-20, 0, 15):
                code = main(["eval-illum", str(p), f"--a={a}", f"--b={b}"])
                out = capsys.readouterr().out
                cases += 1
                if code != 0:
                    failures.append((p.name, a, b, out))
    elapsed = time.perf_counter() - start
    with capsys.disabled():
        acceptance(
            "1 illumination invariance",
            not failures and elapsed < 120,
            f"{cases - len(failures)}/{cases} cases pass, {elapsed:.1f}s (limit 120s)",
        )


def _random_dictionary(rng):
    kind = rng.integers(0, 3)
    if kind == 0:
        n = int(rng.choice([3, 5, 7, 11]))
        from sck.haar import max_levels

        return build_haar(n, int(rng.integers(1, max_levels(n) + 1)))
    if kind == 1:
        m = rng.normal(size=(9, int(rng.integers(9, 30))))
        return Dictionary(3, m / np.linalg.norm(m, axis=0))
    m = rng.normal(size=(25, int(rng.integers(25, 60))))
    return Dictionary(5, m / np.linalg.norm(m, axis=0))


def _unit(rng, dim):
    x = rng.normal(size=dim)
    return x / np.linalg.norm(x)


def test_2_lasso_correctness(acceptance, capsys):
    rng = np.random.default_rng(7)
    worst_kkt = 0.0
    for _ in range(100):
        d = _random_dictionary(rng)
        lam = float(rng.uniform(0.02, 0.5))
        x = _unit(rng, d.dim)
        code = solve_lasso(d, x, SolverParams(lam=lam))
        worst_kkt = max(worst_kkt, kkt_residual(d.atoms, x, code.coeffs, lam))

    worst_orth = 0.0
    for _ in range(100):
        q, _ = np.linalg.qr(rng.normal(size=(9, 9)))
        d = Dictionary(3, q)
        lam = float(rng.uniform(0.01, 0.6))
        x = _unit(rng, 9)
        code = solve_lasso(d, x, SolverParams(lam=lam))
        worst_orth = max(worst_orth, float(np.abs(code.coeffs - soft_threshold(q.T @ x, lam)).max()))

    worst_gap = -math.inf
    for i in range(20):
        d = build_haar(3, 1 + i % 4) if i % 2 == 0 else _random_dictionary(np.random.default_rng(100 + i))
        if d.dim > 25:
            d = build_haar(3, 2)
        lam = float(rng.uniform(0.05, 0.4))
        x = _unit(rng, d.dim)
        code = solve_lasso(d, x, SolverParams(lam=lam))
        ref = lasso_reference(d.atoms, x, lam)
        worst_gap = max(worst_gap, code.objective - objective(d.atoms, x, ref, lam))

    with capsys.disabled():
        acceptance(
            "2 lasso correctness",
            worst_kkt <= 1e-6 and worst_orth <= 1e-8 and worst_gap <= 1e-8,
            f"max KKT {worst_kkt:.2e} (<=1e-6), orthonormal err {worst_orth:.2e} (<=1e-8), "
            f"objective - reference {worst_gap:.2e} (<=1e-8)",
        )


def test_3_dictionary_completeness(acceptance, capsys):
    d = build_haar(11, 5)
    r, r_elim = rank(d), rank_by_elimination(d.atoms)
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=121)
        coef, *_ = np.linalg.lstsq(d.atoms, x, rcond=None)
        worst = max(worst, np.linalg.norm(x - d.atoms @ coef) / np.linalg.norm(x))
    with capsys.disabled():
        acceptance(
            "3 dictionary completeness",
            r == 121 and r_elim == 121 and worst < 1e-8,
            f"rank {r} (elimination {r_elim}), k={d.k}, worst relative residual {worst:.2e}",
        )


def test_4_identity_pair_repeatability(acceptance, capsys):
    img = GrayImage(smooth_image(np.random.default_rng(4), 128, 128, 1.5))
    kps = detect(img, HAAR11, DetectorConfig(max_keypoints=200))
    res = repeatability(kps, kps, Homography.identity(), img.data.shape, img.data.shape)
    with capsys.disabled():
        acceptance(
            "4 identity-pair repeatability",
            len(kps) == 200 and res.repeatability == 1.0,
            f"{len(kps)} key-points, repeatability {res.repeatability!r}",
        )


def test_5_translation_equivariance(acceptance, capsys):
    shift = 5
    tex = smooth_image(np.random.default_rng(5), 128 + shift, 128 + shift, 1.5)
    img_a = GrayImage(tex[:128, :128])
    img_b = GrayImage(tex[shift:, shift:])  # content at A(x, y) appears at B(x - 5, y - 5)
    cfg = DetectorConfig(max_keypoints=10**6)
    ka, kb = detect(img_a, HAAR11, cfg), detect(img_b, HAAR11, cfg)

    margin = cfg.n // 2 + cfg.nms_window // 2 + cfg.gauss_size // 2

    def interior(x, y):
        return margin <= x < 128 - margin and margin <= y < 128 - margin

    moved = {(p.x - shift, p.y - shift): p for p in ka
             if interior(p.x, p.y) and interior(p.x - shift, p.y - shift)}
    seen = {(p.x, p.y): p for p in kb if interior(p.x, p.y) and interior(p.x + shift, p.y + shift)}
    exact = moved.keys() == seen.keys() and all(
        moved[k].cm == seen[k].cm and abs(moved[k].sm - seen[k].sm) <= 1e-9 for k in moved)

    H = Homography.translation(-shift, -shift)
    res = repeatability(ka, kb, H, (128, 128), (128, 128))

    # brute force: which restricted A points have no exact partner in B
    from sck.evaluation import common_part

    ia, _ = common_part(ka, H, (128, 128), (128, 128))
    ib, _ = common_part(kb, H.inverse(), (128, 128), (128, 128))
    bset = {(kb[j].x, kb[j].y) for j in ib}
    partnered = sum((ka[i].x - shift, ka[i].y - shift) in bset for i in ia)
    expected = partnered / min(len(ia), len(ib))
    with capsys.disabled():
        acceptance(
            "5 translation equivariance",
            exact and res.repeatability >= 0.95 and res.repeatability == expected,
            f"{len(moved)} interior key-points shift exactly: {exact}; repeatability "
            f"{res.repeatability:.4f} (brute force {expected:.4f}, need >= 0.95)",
        )


def test_6_cm_gate_and_size(acceptance, capsys):
    rng = np.random.default_rng(6)
    size = (11 / 2) * math.sqrt(2)
    checked, bad, runs = 0, 0, 0
    while runs < 1000:
        h, w = int(rng.integers(11, 20)), int(rng.integers(11, 20))
        cm_min = int(rng.integers(0, 12))
        cfg = DetectorConfig(cm_min=cm_min, cm_max=cm_min + int(rng.integers(0, 30)),
                             lam=float(rng.uniform(0.05, 0.3)), max_keypoints=10**6)
        img = GrayImage(rng.uniform(0, 255, (h, w)))
        for p in detect(img, HAAR11, cfg):
            checked += 1
            if not (cfg.cm_min <= p.cm <= cfg.cm_max) or abs(p.size - size) > 1e-9:
                bad += 1
        runs += 1
    with capsys.disabled():
        acceptance(
            "6 cm gate and size rule",
            bad == 0 and checked > 0 and abs(size - 7.7782) < 1e-4,
            f"{runs} detections, {checked} key-points checked, {bad} violations, size {size:.9f}",
        )


def test_7_nms_oracle_and_idempotence(acceptance, capsys):
    rng = np.random.default_rng(8)
    mismatches = not_idempotent = 0
    for trial in range(300):
        m = int(rng.integers(0, 201))
        side = int(rng.integers(5, 60))
        kps = [KeyPoint(int(rng.integers(0, side)), int(rng.integers(0, side)), 7.0, 3,
                        float(rng.choice([1.0, 2.5, 3.0])) if trial % 2 else float(rng.uniform(0, 10)))
               for _ in range(m)]
        window = int(rng.choice([1, 3, 5, 7, 9]))
        out = nms(kps, window)
        mismatches += out != nms_brute_force(kps, window)
        not_idempotent += nms(out, window) != out
    with capsys.disabled():
        acceptance(
            "7 nms oracle equivalence and idempotence",
            mismatches == 0 and not_idempotent == 0,
            f"300 lists (<=200 points): {mismatches} oracle mismatches, {not_idempotent} non-idempotent",
        )


def test_8_thread_count_determinism(tmp_path, acceptance, capsys):
    img = tmp_path / "d.pgm"
    save_image(GrayImage(smooth_image(np.random.default_rng(9), 96, 96, 1.5)), img)
    env = dict(os.environ, NUMBA_NUM_THREADS="8")
    outs = []
    for threads in ("1", "8"):
        proc = subprocess.run([sys.executable, "-m", "sck", "detect", str(img), "--threads", threads],
                              capture_output=True, env=env, check=True)
        outs.append(proc.stdout)
    with capsys.disabled():
        acceptance(
            "8 determinism across --threads 1/8",
            outs[0] == outs[1] and len(outs[0].splitlines()) > 1,
            f"{len(outs[0].splitlines()) - 1} key-points, identical bytes: {outs[0] == outs[1]}",
        )


def test_9_matching_score_sanity(acceptance, capsys):
    rng = np.random.default_rng(10)
    img = GrayImage(smooth_image(rng, 96, 96, 1.5))
    kps = detect(img, HAAR11, DetectorConfig(max_keypoints=200))
    same = matching_score(kps, kps, Homography.identity(), img, img)

    centres = [(20, 20), (60, 20), (20, 60), (60, 60), (40, 40)]
    patches = [rng.uniform(0, 255, (17, 17)) for _ in centres]
    a, b = np.zeros((80, 80)), np.zeros((80, 80))
    for i, (x, y) in enumerate(centres):
        a[y - 8:y + 9, x - 8:x + 9] = patches[i]
        b[y - 8:y + 9, x - 8:x + 9] = patches[(i + 1) % len(centres)]
    decoy_kps = [KeyPoint(x, y, 7.778174593052023, 3, 1.0) for x, y in centres]
    decoy = matching_score(decoy_kps, decoy_kps, Homography.identity(), GrayImage(a), GrayImage(b))

    bounded = True
    for s in range(5):
        tex = smooth_image(np.random.default_rng(200 + s), 90, 90, 1.5)
        ia, ib = GrayImage(tex[:80, :80]), GrayImage(tex[3 + s:83 + s, 2:82])
        cfg = DetectorConfig(max_keypoints=100)
        r = matching_score(detect(ia, HAAR11, cfg), detect(ib, HAAR11, cfg),
                           Homography.translation(-2, -3 - s), ia, ib)
        bounded &= r.matching_score <= r.repeatability
    with capsys.disabled():
        acceptance(
            "9 matching-score sanity",
            same.matching_score == 1.0 and decoy.correspondences == 5 and decoy.matching_score == 0.0 and bounded,
            f"identical pair {same.matching_score}, decoy {decoy.matching_score} "
            f"({decoy.correspondences} correspondences), score <= repeatability: {bounded}",
        )
