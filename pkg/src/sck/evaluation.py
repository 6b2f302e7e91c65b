"""Repeatability and matching score under a known homography.

Regions are discs of radius ``KeyPoint.size``. A disc from image A is mapped
into image B through the local affine linearization of the homography,
giving an ellipse; two regions correspond when their overlap error
(1 - IoU, estimated on a sampling grid) is below 0.4.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import DetectorConfig, KeyPoint, detect
from .haar import Dictionary
from .image_io import GrayImage

OVERLAP_THRESHOLD = 0.4
GRID_RESOLUTION = 400
DESCRIPTOR_SIDE = 8
# pairs whose IoU upper bound is below this skip the sampling grid; the margin
# over 1 - OVERLAP_THRESHOLD absorbs grid estimation error
PRUNE_IOU = 0.55


class SingularHomographyError(ValueError):
    pass


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise SingularHomographyError("homography has non-finite entries")
        if h[2, 2] != 0.0:
            h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise SingularHomographyError(f"homography is singular (det={np.linalg.det(h):.3e})")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> "Homography":
        return cls([[1, 0, dx], [0, 1, dy], [0, 0, 1]])

    @classmethod
    def scaling(cls, s: float) -> "Homography":
        return cls([[s, 0, 0], [0, s, 0], [0, 0, 1]])

    @classmethod
    def rotation(cls, theta: float, cx: float = 0.0, cy: float = 0.0) -> "Homography":
        c, s = math.cos(theta), math.sin(theta)
        return cls([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def apply(self, pts) -> np.ndarray:
        """Map (N, 2) points (x, y); raises ProjectionError at the plane at infinity."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        hom = pts @ self.h[:, :2].T + self.h[:, 2]
        w = hom[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise ProjectionError("point maps to the plane at infinity")
        return hom[:, :2] / w[:, None]

    def jacobian(self, x: float, y: float) -> np.ndarray:
        h = self.h
        w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
        if abs(w) < 1e-12:
            raise ProjectionError(f"({x}, {y}) maps to the plane at infinity")
        u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
        v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
        return np.array([
            [h[0, 0] - u * h[2, 0], h[0, 1] - u * h[2, 1]],
            [h[1, 0] - v * h[2, 0], h[1, 1] - v * h[2, 1]],
        ]) / w


def parse_homography(text: str) -> Homography:
    try:
        values = [float(t) for t in text.split()]
    except ValueError:
        raise ValueError("homography file must hold 9 real numbers") from None
    if len(values) != 9:
        raise ValueError(f"homography file must hold 9 real numbers, found {len(values)}")
    return Homography(np.array(values).reshape(3, 3))


@dataclass(frozen=True, eq=False)
class Ellipse:
    """Points p with (p - center)^T shape^-1 (p - center) <= 1."""

    center: np.ndarray
    shape: np.ndarray

    @classmethod
    def disc(cls, x: float, y: float, r: float) -> "Ellipse":
        return cls(np.array([x, y], dtype=np.float64), r * r * np.eye(2))

    @property
    def area(self) -> float:
        return math.pi * math.sqrt(max(np.linalg.det(self.shape), 0.0))

    @property
    def half_extent(self) -> np.ndarray:
        return np.sqrt(np.diag(self.shape))

    @property
    def outer_radius(self) -> float:
        return math.sqrt(max(np.linalg.eigvalsh(self.shape)[-1], 0.0))

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        inv = np.linalg.inv(self.shape)
        dx = xs - self.center[0]
        dy = ys - self.center[1]
        return inv[0, 0] * dx * dx + (inv[0, 1] + inv[1, 0]) * dx * dy + inv[1, 1] * dy * dy <= 1.0


def keypoint_region(kp: KeyPoint) -> Ellipse:
    return Ellipse.disc(kp.x, kp.y, kp.size)


def project_region(kp: KeyPoint, H: Homography) -> Ellipse:
    center = H.apply([[kp.x, kp.y]])[0]
    if not np.all(np.isfinite(center)):
        raise ProjectionError("projected center is not finite")
    J = H.jacobian(kp.x, kp.y)
    return Ellipse(center, (kp.size * kp.size) * (J @ J.T))


def overlap_error(a: Ellipse, b: Ellipse, resolution: int = GRID_RESOLUTION) -> float:
    """1 - IoU of two ellipses, by sampling the union's bounding box."""
    lo = np.minimum(a.center - a.half_extent, b.center - b.half_extent)
    hi = np.maximum(a.center + a.half_extent, b.center + b.half_extent)
    alo, ahi = a.center - a.half_extent, a.center + a.half_extent
    blo, bhi = b.center - b.half_extent, b.center + b.half_extent
    if np.any(ahi < blo) or np.any(bhi < alo):
        return 1.0
    step = (hi - lo) / resolution
    xs = lo[0] + (np.arange(resolution) + 0.5) * step[0]
    ys = lo[1] + (np.arange(resolution) + 0.5) * step[1]
    gx, gy = np.meshgrid(xs, ys)
    ina = a.contains(gx, gy)
    inb = b.contains(gx, gy)
    union = np.count_nonzero(ina | inb)
    if union == 0:
        return 1.0
    return 1.0 - np.count_nonzero(ina & inb) / union


def _lens_area(r1: float, r2: float, d: float) -> float:
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos(max(-1.0, min(1.0, (d * d + r1 * r1 - r2 * r2) / (2 * d * r1))))
    a2 = r2 * r2 * math.acos(max(-1.0, min(1.0, (d * d + r2 * r2 - r1 * r1) / (2 * d * r2))))
    k = (-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)
    return a1 + a2 - 0.5 * math.sqrt(max(k, 0.0))


def iou_upper_bound(a: Ellipse, b: Ellipse) -> float:
    """Cheap upper bound on IoU via circumscribed circles."""
    d = float(np.linalg.norm(a.center - b.center))
    area_a, area_b = a.area, b.area
    inter = min(_lens_area(a.outer_radius, b.outer_radius, d), area_a, area_b)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


@dataclass
class EvalResult:
    correspondences: int
    repeatability: float
    correct_matches: int
    matching_score: float
    denominator: int
    pairs: list[tuple[int, int]] = field(default_factory=list, repr=False)

    @property
    def undefined(self) -> bool:
        return self.denominator == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("pairs")
        if self.undefined:
            d["repeatability"] = None
            d["matching_score"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)

    def to_text(self) -> str:
        return "\n".join(f"{k} {v}" for k, v in self.to_dict().items()) + "\n"


def _inside(region: Ellipse, shape: tuple[int, int], mask: np.ndarray | None) -> bool:
    h, w = shape
    lo = region.center - region.half_extent
    hi = region.center + region.half_extent
    if lo[0] < 0 or lo[1] < 0 or hi[0] > w - 1 or hi[1] > h - 1:
        return False
    if mask is None:
        return True
    x0, y0 = int(math.floor(lo[0])), int(math.floor(lo[1]))
    x1, y1 = int(math.ceil(hi[0])), int(math.ceil(hi[1]))
    return bool(mask[y0:y1 + 1, x0:x1 + 1].all())


def common_part(kps, H: Homography, own_shape, other_shape, own_mask=None, other_mask=None):
    """Indices of key-points whose region lies inside their own image and
    whose projected region lies inside the other image."""
    keep, projected = [], []
    for i, kp in enumerate(kps):
        if not _inside(keypoint_region(kp), own_shape, own_mask):
            continue
        try:
            e = project_region(kp, H)
        except ProjectionError:
            continue
        if _inside(e, other_shape, other_mask):
            keep.append(i)
            projected.append(e)
    return keep, projected


def greedy_correspondences(errors: dict[tuple[int, int], float], order_key=None) -> list[tuple[int, int]]:
    """One-to-one pairs with error below the threshold, taken by ascending error."""
    cand = [(e, order_key(p) if order_key else p, p) for p, e in errors.items() if e < OVERLAP_THRESHOLD]
    cand.sort(key=lambda t: (t[0], t[1]))
    used_a, used_b, out = set(), set(), []
    for _, _, (i, j) in cand:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
            out.append((i, j))
    return out


def _match_regions(kps_a, kps_b, H, shape_a, shape_b, mask_a=None, mask_b=None, resolution=GRID_RESOLUTION):
    idx_a, proj_a = common_part(kps_a, H, shape_a, shape_b, mask_a, mask_b)
    idx_b, _ = common_part(kps_b, H.inverse(), shape_b, shape_a, mask_b, mask_a)
    regions_b = [keypoint_region(kps_b[j]) for j in idx_b]
    errors: dict[tuple[int, int], float] = {}
    if idx_a and idx_b:
        centers_b = np.array([[kps_b[j].x, kps_b[j].y] for j in idx_b], dtype=np.float64)
        radii_b = np.array([r.outer_radius for r in regions_b])
        for ia, ea in zip(idx_a, proj_a):
            dist = np.linalg.norm(centers_b - ea.center, axis=1)
            for t in np.flatnonzero(dist < radii_b + ea.outer_radius):
                eb = regions_b[t]
                if iou_upper_bound(ea, eb) < PRUNE_IOU:
                    continue
                errors[(ia, idx_b[t])] = overlap_error(ea, eb, resolution)

    def key(p):
        a, b = kps_a[p[0]], kps_b[p[1]]
        return (a.y, a.x, b.y, b.x)

    pairs = greedy_correspondences(errors, key)
    return idx_a, idx_b, pairs


def repeatability(kps_a, kps_b, H: Homography, shape_a, shape_b, mask_a=None, mask_b=None,
                  resolution: int = GRID_RESOLUTION) -> EvalResult:
    """``shape_*`` are (height, width); ``mask_*`` optional validity masks."""
    idx_a, idx_b, pairs = _match_regions(kps_a, kps_b, H, shape_a, shape_b, mask_a, mask_b, resolution)
    denom = min(len(idx_a), len(idx_b))
    rep = len(pairs) / denom if denom else math.nan
    return EvalResult(len(pairs), rep, 0, math.nan if not denom else 0.0, denom, pairs)


def _bilinear(a: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    h, w = a.shape
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    top = (1 - fx) * a[y0, x0] + fx * a[y0, x1]
    bot = (1 - fx) * a[y1, x0] + fx * a[y1, x1]
    return (1 - fy) * top + fy * bot


def describe(img: GrayImage, kp: KeyPoint, side: int = DESCRIPTOR_SIDE) -> np.ndarray:
    """Normalized bilinear resample of the key-point's bounding square."""
    r = kp.size
    t = -r + (np.arange(side) + 0.5) * (2 * r / side)
    gx, gy = np.meshgrid(kp.x + t, kp.y + t)
    v = _bilinear(img.data, gx, gy).ravel()
    v = v - v.mean()
    nrm = np.linalg.norm(v)
    if nrm < 1e-10:
        return np.zeros(side * side)
    return v / nrm


def matching_score(kps_a, kps_b, H: Homography, img_a: GrayImage, img_b: GrayImage,
                   mask_a=None, mask_b=None, resolution: int = GRID_RESOLUTION) -> EvalResult:
    """A corresponding pair is a correct match when B's member is (one of) the
    nearest descriptors to A's member among all of B's common-part key-points."""
    shape_a, shape_b = img_a.data.shape, img_b.data.shape
    idx_a, idx_b, pairs = _match_regions(kps_a, kps_b, H, shape_a, shape_b, mask_a, mask_b, resolution)
    denom = min(len(idx_a), len(idx_b))
    if not denom:
        return EvalResult(len(pairs), math.nan, 0, math.nan, 0, pairs)
    desc_a = {i: describe(img_a, kps_a[i]) for i in idx_a}
    desc_b = np.array([describe(img_b, kps_b[j]) for j in idx_b])
    col = {j: t for t, j in enumerate(idx_b)}
    correct = 0
    for i, j in pairs:
        dist = np.linalg.norm(desc_b - desc_a[i], axis=1)
        if dist[col[j]] <= dist.min():
            correct += 1
    return EvalResult(len(pairs), len(pairs) / denom, correct, correct / denom, denom, pairs)


def evaluate_pair(img_a: GrayImage, img_b: GrayImage, H: Homography, d: Dictionary,
                  cfg: DetectorConfig = DetectorConfig(), mask_b=None) -> EvalResult:
    return matching_score(detect(img_a, d, cfg), detect(img_b, d, cfg), H, img_a, img_b, mask_b=mask_b)


def _snap(v: np.ndarray) -> np.ndarray:
    r = np.round(v)
    return np.where(np.abs(v - r) < 1e-9, r, v)


def warp_coordinates(shape, H: Homography) -> tuple[np.ndarray, np.ndarray]:
    """Source coordinates of every destination pixel under the inverse map."""
    h, w = shape
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    hinv = H.inverse().h
    den = hinv[2, 0] * gx + hinv[2, 1] * gy + hinv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (hinv[0, 0] * gx + hinv[0, 1] * gy + hinv[0, 2]) / den
        sy = (hinv[1, 0] * gx + hinv[1, 1] * gy + hinv[1, 2]) / den
    return _snap(sx), _snap(sy)


def warp_image(img: GrayImage, H: Homography, fill: float = 0.0,
               return_mask: bool = False):
    """Inverse-warp ``img`` through H (source -> destination), bilinear.

    Destination pixels whose source falls outside the image get ``fill`` and
    are marked invalid in the optional mask.
    """
    h, w = img.data.shape
    sx, sy = warp_coordinates((h, w), H)
    valid = np.isfinite(sx) & np.isfinite(sy) & (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    out = np.full((h, w), float(fill))
    out[valid] = _bilinear(img.data, sx[valid], sy[valid])
    warped = GrayImage(out)
    return (warped, valid) if return_mask else warped


@dataclass
class IlluminationReport:
    a: float
    b: float
    passed: bool
    base_count: int
    changed_count: int
    max_sm_diff: float
    only_base: list[KeyPoint] = field(default_factory=list)
    only_changed: list[KeyPoint] = field(default_factory=list)
    sm_mismatch: list[tuple[KeyPoint, KeyPoint]] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"illumination a={self.a:g} b={self.b:g}: {'PASS' if self.passed else 'FAIL'} "
               f"({self.base_count} vs {self.changed_count} key-points, max |dSM|={self.max_sm_diff:.3e})"]
        out += [f"only in base: {kp.x} {kp.y} cm={kp.cm} sm={kp.sm:.12g}" for kp in self.only_base]
        out += [f"only in changed: {kp.x} {kp.y} cm={kp.cm} sm={kp.sm:.12g}" for kp in self.only_changed]
        out += [f"sm differs at {p.x} {p.y}: {p.sm:.12g} vs {q.sm:.12g}" for p, q in self.sm_mismatch]
        return out


def compare_detections(base: list[KeyPoint], changed: list[KeyPoint], a: float, b: float,
                       sm_tol: float = 1e-9) -> IlluminationReport:
    kb = {(k.x, k.y, k.cm): k for k in base}
    kc = {(k.x, k.y, k.cm): k for k in changed}
    only_base = [kb[t] for t in sorted(kb.keys() - kc.keys())]
    only_changed = [kc[t] for t in sorted(kc.keys() - kb.keys())]
    worst, mism = 0.0, []
    for t in sorted(kb.keys() & kc.keys()):
        diff = abs(kb[t].sm - kc[t].sm)
        worst = max(worst, diff)
        if diff > sm_tol:
            mism.append((kb[t], kc[t]))
    ok = not only_base and not only_changed and not mism and len(base) == len(changed)
    return IlluminationReport(a, b, ok, len(base), len(changed), worst, only_base, only_changed, mism)


def illumination_harness(img: GrayImage, d: Dictionary, cfg: DetectorConfig, a: float, b: float,
                         base: list[KeyPoint] | None = None) -> IlluminationReport:
    """Detect on ``img`` and on ``a * img + b`` (no clamping) and compare."""
    if not a > 0:
        raise ValueError(f"gain a must be > 0, got {a}")
    if base is None:
        base = detect(img, d, cfg)
    return compare_detections(base, detect(img.affine(a, b), d, cfg), a, b)
