"""The sparse-coding key-point detector.

Pipeline: Gaussian pre-filter, then for every interior n x n block a
zero-mean unit-norm vector is coded against the dictionary. The number of
non-zero coefficients (complexity) gates the block; survivors are ranked by
a1 * ||a||_0 + a2 * ||a||_1, thinned by non-maxima suppression and capped
at the top K.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .haar import Dictionary
from .image_io import GrayImage
from .lasso import SolverParams, solve_batch

log = logging.getLogger(__name__)

DEGENERATE_EPS = 1e-10


@dataclass(frozen=True)
class KeyPoint:
    x: int
    y: int
    size: float
    cm: int
    sm: float


@dataclass(frozen=True)
class DetectorConfig:
    n: int = 11
    lam: float = 0.15
    cm_min: int = 3
    cm_max: int | None = None  # None: number of atoms in the dictionary
    nms_window: int = 5
    max_keypoints: int = 1000
    gauss_sigma: float = 0.5
    gauss_size: int = 3
    a1: float = 1.0
    a2: float = 1.0
    stride: int = 1
    tol: float = 1e-7
    max_iter: int = 10000

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError(f"block size n must be odd and >= 3, got {self.n}")
        if self.cm_min < 0:
            raise ValueError(f"cm_min must be >= 0, got {self.cm_min}")
        if self.cm_max is not None and self.cm_max < self.cm_min:
            raise ValueError(f"cm_max ({self.cm_max}) must be >= cm_min ({self.cm_min})")
        if self.nms_window < 1 or self.nms_window % 2 == 0:
            raise ValueError(f"nms window must be odd and >= 1, got {self.nms_window}")
        if self.max_keypoints < 0:
            raise ValueError(f"max_keypoints must be >= 0, got {self.max_keypoints}")
        if not self.gauss_sigma > 0:
            raise ValueError(f"gauss_sigma must be > 0, got {self.gauss_sigma}")
        if self.gauss_size < 1 or self.gauss_size % 2 == 0:
            raise ValueError(f"gauss_size must be odd and >= 1, got {self.gauss_size}")
        if not (self.a1 > 0 and self.a2 > 0):
            raise ValueError("a1 and a2 must be positive")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        # validates lambda, tol, max_iter
        self.solver_params()

    @property
    def keypoint_size(self) -> float:
        return (self.n / 2) * math.sqrt(2)

    def solver_params(self) -> SolverParams:
        return SolverParams(lam=self.lam, tol=self.tol, max_iter=self.max_iter)

    def resolved_cm_max(self, d: Dictionary) -> int:
        return d.k if self.cm_max is None else self.cm_max


@dataclass
class DetectionStats:
    blocks: int = 0
    degenerate: int = 0
    unconverged: int = 0
    gated: int = 0
    suppressed: int = 0
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class Detection:
    keypoints: list[KeyPoint]
    stats: DetectionStats


def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    r = size // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_filter(img: GrayImage, sigma: float, size: int) -> GrayImage:
    """Separable Gaussian blur with edge replication; output has the input's shape."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    if size == 1:
        return img
    g = gaussian_kernel(sigma, size)
    r = size // 2
    a = img.data
    h, w = a.shape
    p = np.pad(a, ((0, 0), (r, r)), mode="edge")
    rows = sum(g[i] * p[:, i:i + w] for i in range(size))
    p = np.pad(rows, ((r, r), (0, 0)), mode="edge")
    out = sum(g[i] * p[i:i + h, :] for i in range(size))
    return GrayImage(out)


def normalize_block(block) -> np.ndarray | None:
    """Zero-mean, unit-norm row-major vector of ``block``; None if the block is flat."""
    v = np.asarray(block, dtype=np.float64).ravel()
    v = v - v.mean()
    nrm = np.linalg.norm(v)
    if nrm < DEGENERATE_EPS:
        return None
    return v / nrm


def normalize_blocks(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``normalize_block``; returns (vectors, degenerate mask)."""
    V = X - X.mean(axis=1, keepdims=True)
    nrm = np.linalg.norm(V, axis=1)
    degenerate = nrm < DEGENERATE_EPS
    V[~degenerate] /= nrm[~degenerate, None]
    V[degenerate] = 0.0
    return V, degenerate


def _beats(q: KeyPoint, qi: int, p: KeyPoint, pi: int) -> bool:
    if q.sm != p.sm:
        return q.sm > p.sm
    return (q.y, q.x, qi) < (p.y, p.x, pi)


def nms(kps: list[KeyPoint], window: int) -> list[KeyPoint]:
    """Keep key-points whose strength beats every other one in their window.

    The window is the ``window x window`` square centred on the key-point.
    Exact strength ties go to the key-point earliest in row-major order.
    Survivors keep their input order.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"nms window must be odd and >= 1, got {window}")
    half = window // 2
    grid: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i, kp in enumerate(kps):
        grid[(kp.x, kp.y)].append(i)
    out = []
    for i, p in enumerate(kps):
        keep = True
        for dy in range(-half, half + 1):
            for dx in range(-half, half + 1):
                for j in grid.get((p.x + dx, p.y + dy), ()):
                    if j != i and _beats(kps[j], j, p, i):
                        keep = False
                        break
                if not keep:
                    break
            if not keep:
                break
        if keep:
            out.append(p)
    return out


def top_k(kps: list[KeyPoint], k: int) -> list[KeyPoint]:
    return sorted(kps, key=lambda kp: (-kp.sm, kp.y, kp.x))[:k]


def candidate_keypoints(img: GrayImage, d: Dictionary, cfg: DetectorConfig) -> Detection:
    """All gated key-points before suppression, in row-major order."""
    if d.n != cfg.n:
        raise ValueError(f"dictionary block size {d.n} does not match config n={cfg.n}")
    stats = DetectionStats()
    n = cfg.n
    if img.width < n or img.height < n:
        msg = f"image {img.width}x{img.height} is smaller than the {n}x{n} block"
        log.warning(msg)
        stats.diagnostics.append(msg)
        return Detection([], stats)

    filtered = gaussian_filter(img, cfg.gauss_sigma, cfg.gauss_size).data
    windows = sliding_window_view(filtered, (n, n))[::cfg.stride, ::cfg.stride]
    rows, cols = windows.shape[:2]
    X = windows.reshape(rows * cols, n * n)
    V, degenerate = normalize_blocks(X)
    live = np.flatnonzero(~degenerate)

    codes = solve_batch(d, V[live], cfg.solver_params())
    stats.blocks = rows * cols
    stats.degenerate = int(degenerate.sum())
    stats.unconverged = int((~codes.converged).sum())
    if stats.unconverged:
        msg = f"{stats.unconverged} blocks skipped: solver did not converge"
        log.warning(msg)
        stats.diagnostics.append(msg)

    cm = np.count_nonzero(codes.coeffs, axis=1)
    l1 = np.abs(codes.coeffs).sum(axis=1)
    cm_max = cfg.resolved_cm_max(d)
    keep = codes.converged & (cm >= cfg.cm_min) & (cm <= cm_max)
    stats.gated = int((codes.converged & ~keep).sum())

    size = cfg.keypoint_size
    half = n // 2
    out = []
    for idx in np.flatnonzero(keep):
        b = int(live[idx])
        r, c = divmod(b, cols)
        cmi = int(cm[idx])
        out.append(KeyPoint(
            x=c * cfg.stride + half,
            y=r * cfg.stride + half,
            size=size,
            cm=cmi,
            sm=cfg.a1 * cmi + cfg.a2 * float(l1[idx]),
        ))
    return Detection(out, stats)


def run_detector(img: GrayImage, d: Dictionary, cfg: DetectorConfig = DetectorConfig()) -> Detection:
    det = candidate_keypoints(img, d, cfg)
    kept = nms(det.keypoints, cfg.nms_window)
    det.stats.suppressed = len(det.keypoints) - len(kept)
    return Detection(top_k(kept, cfg.max_keypoints), det.stats)


def detect(img: GrayImage, d: Dictionary, cfg: DetectorConfig = DetectorConfig()) -> list[KeyPoint]:
    """Key-points of ``img`` sorted by descending strength (ties row-major)."""
    return run_detector(img, d, cfg).keypoints


def format_keypoints(kps: list[KeyPoint], cfg: DetectorConfig, d: Dictionary) -> str:
    lines = [f"# SCK n={cfg.n} lambda={cfg.lam:g} cm=[{cfg.cm_min},{cfg.resolved_cm_max(d)}]"]
    lines += [f"{kp.x} {kp.y} {kp.size:.6f} {kp.cm} {kp.sm:.6f}" for kp in kps]
    return "\n".join(lines) + "\n"


def parse_keypoints(text: str) -> list[KeyPoint]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x, y, size, cm, sm = line.split()
        out.append(KeyPoint(int(x), int(y), float(size), int(cm), float(sm)))
    return out
