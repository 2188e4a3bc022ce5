"""Boundary-detection and boundary-flow metrics, plus two baseline matchers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .oracle import BfGroundTruth, boundary_points

log = logging.getLogger(__name__)

N_THRESHOLDS = 33
TOL_FRACTION = 0.0075
EPE_MATCH_RADIUS = 2.0
EPE_PENALTY = 100.0


# ---------------------------------------------------------------------------
# boundary flow fields and EPE
# ---------------------------------------------------------------------------


@dataclass
class FlowField:
    """Sparse boundary flow: integer source pixels (x, y) and real displacements."""

    points: np.ndarray
    flow: np.ndarray
    source: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        self.flow = np.asarray(self.flow, dtype=np.float64).reshape(-1, 2)
        if self.source is None:
            self.source = np.full(len(self.points), -1, dtype=np.int64)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)
        if not (len(self.points) == len(self.flow) == len(self.source)):
            raise ValueError("points, flow and source lengths differ")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls) -> "FlowField":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)))

    def as_dict(self) -> Dict[Tuple[int, int], Tuple[float, float]]:
        return {(int(x), int(y)): (float(u), float(v))
                for (x, y), (u, v) in zip(self.points, self.flow)}

    def to_text(self) -> str:
        lines = [f"{x} {y} {float(u)!r} {float(v)!r} {s}"
                 for (x, y), (u, v), s in zip(self.points, self.flow, self.source)]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "FlowField":
        rows = [line.split() for line in text.splitlines() if line.strip()]
        if not rows:
            return cls.empty()
        pts = [(int(r[0]), int(r[1])) for r in rows]
        flow = [(float(r[2]), float(r[3])) for r in rows]
        src = [int(r[4]) if len(r) > 4 else -1 for r in rows]
        return cls(pts, flow, src)


def epe(pred: FlowField, gt: BfGroundTruth, radius: float = EPE_MATCH_RADIUS,
        penalty: float = EPE_PENALTY) -> float:
    """Mean end-point error over the defined ground-truth pixels.

    Each ground-truth pixel is compared with the nearest predicted entry
    within ``radius`` px; pixels with no such entry cost ``penalty``.
    """
    defined = gt.defined
    if not defined.any():
        raise ValueError("ground truth has no defined entries")
    g_pts = gt.points[defined].astype(np.float64)
    g_flow = gt.flow[defined]
    if len(pred) == 0:
        return float(penalty)
    tree = cKDTree(pred.points.astype(np.float64))
    dist, idx = tree.query(g_pts, k=1, distance_upper_bound=radius + 1e-9)
    hit = np.isfinite(dist)
    err = np.full(len(g_pts), float(penalty))
    err[hit] = np.linalg.norm(pred.flow[idx[hit]] - g_flow[hit], axis=1)
    return float(err.mean())


# ---------------------------------------------------------------------------
# precision / recall
# ---------------------------------------------------------------------------


@dataclass
class PrCounts:
    """Per-threshold counts for one image."""

    thresholds: np.ndarray
    matched_pred: np.ndarray
    total_pred: np.ndarray
    matched_gt: np.ndarray
    total_gt: int

    @property
    def precision(self) -> np.ndarray:
        return _precision(self.matched_pred, self.total_pred)

    @property
    def recall(self) -> np.ndarray:
        if self.total_gt == 0:
            return np.zeros(len(self.thresholds))
        return self.matched_gt / self.total_gt

    @property
    def f(self) -> np.ndarray:
        return f_measure(self.precision, self.recall)


@dataclass
class BenchmarkSummary:
    ods: float
    ois: float
    ap: float
    ods_threshold: float
    precision: np.ndarray = field(repr=False, default=None)
    recall: np.ndarray = field(repr=False, default=None)
    thresholds: np.ndarray = field(repr=False, default=None)
    ods_pooled: float = float("nan")


def _precision(matched, total):
    matched = np.asarray(matched, dtype=np.float64)
    total = np.asarray(total, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, matched / np.maximum(total, 1), 1.0)


def f_measure(p, r):
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)


def default_thresholds(n: int = N_THRESHOLDS) -> np.ndarray:
    return np.linspace(1.0 / (n + 1), 1.0 - 1.0 / (n + 1), n)


def default_tolerance(shape) -> float:
    return TOL_FRACTION * float(np.hypot(*shape[:2]))


def greedy_correspondence(pred_pts: np.ndarray, gt_pts: np.ndarray, tol: float) -> int:
    """One-to-one matching of point sets, closest pairs first, within ``tol``.

    Ties in distance go to the lower (pred, gt) index pair. Returns the
    number of matched pairs.
    """
    if len(pred_pts) == 0 or len(gt_pts) == 0:
        return 0
    tree = cKDTree(np.asarray(gt_pts, dtype=np.float64))
    pairs = tree.query_ball_point(np.asarray(pred_pts, dtype=np.float64), tol + 1e-9)
    cand = [(float(np.sum((pred_pts[i] - gt_pts[j]) ** 2)), i, j)
            for i, js in enumerate(pairs) for j in js]
    if not cand:
        return 0
    cand.sort()
    used_p = np.zeros(len(pred_pts), bool)
    used_g = np.zeros(len(gt_pts), bool)
    n = 0
    for _, i, j in cand:
        if not used_p[i] and not used_g[j]:
            used_p[i] = used_g[j] = True
            n += 1
    return n


def boundary_pr(pred: np.ndarray, gt: np.ndarray, n_thresholds: int = N_THRESHOLDS,
                tol: float | None = None, thresholds: np.ndarray | None = None) -> PrCounts:
    """Match thresholded ``pred`` (already thinned) against binary ``gt`` at each threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    tol = default_tolerance(pred.shape) if tol is None else tol
    th = default_thresholds(n_thresholds) if thresholds is None else np.asarray(thresholds)
    gpts = boundary_points(gt).astype(np.float64)
    mp, tp, mg = [], [], []
    for t in th:
        ppts = boundary_points(pred >= t).astype(np.float64)
        m = greedy_correspondence(ppts, gpts, tol)
        mp.append(m)
        tp.append(len(ppts))
        mg.append(m)
    return PrCounts(th, np.array(mp), np.array(tp), np.array(mg), len(gpts))


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, n_points: int = 101) -> float:
    """Area under the PR curve with precision made monotone in recall."""
    r = np.asarray(recall, dtype=np.float64)
    p = np.asarray(precision, dtype=np.float64)
    grid = np.linspace(0, 1, n_points)
    vals = []
    for g in grid:
        sel = r >= g - 1e-12
        vals.append(p[sel].max() if sel.any() else 0.0)
    return float(np.mean(vals))


def summarize(per_image: Sequence[PrCounts]) -> BenchmarkSummary:
    """ODS, OIS and AP over a dataset.

    ODS is the mean per-image F at the best shared threshold and OIS the
    mean of per-image best F, so OIS >= ODS always. The PR curve behind AP
    (and ``ods_pooled``) pools match counts over all images.
    """
    if not per_image:
        raise ValueError("no images to summarize")
    th = per_image[0].thresholds
    for c in per_image:
        if not np.array_equal(c.thresholds, th):
            raise ValueError("images were evaluated at different thresholds")
    usable = [c for c in per_image if c.total_gt > 0]
    if len(usable) < len(per_image):
        log.info("%d image(s) without ground-truth boundary excluded from recall",
                 len(per_image) - len(usable))
    if not usable:
        raise ValueError("every image has an empty ground truth")
    mean_f = np.mean([c.f for c in usable], axis=0)
    best = int(np.argmax(mean_f))
    ois = float(np.mean([c.f.max() for c in usable]))
    mp = np.sum([c.matched_pred for c in per_image], axis=0)
    tp = np.sum([c.total_pred for c in per_image], axis=0)
    mg = np.sum([c.matched_gt for c in usable], axis=0)
    tg = sum(c.total_gt for c in usable)
    p = _precision(mp, tp)
    r = mg / tg
    return BenchmarkSummary(float(mean_f[best]), ois, interpolated_ap(p, r), float(th[best]),
                            p, r, th, float(f_measure(p, r).max()))


def pr_table_csv(per_image: Sequence[PrCounts], names: Sequence[str] | None = None,
                 summary: BenchmarkSummary | None = None) -> str:
    rows = ["image,threshold,precision,recall,f"]
    names = names or [str(i) for i in range(len(per_image))]
    for name, c in zip(names, per_image):
        for t, pp, rr, ff in zip(c.thresholds, c.precision, c.recall, c.f):
            rows.append(f"{name},{t:.6f},{pp:.6f},{rr:.6f},{ff:.6f}")
    if summary is not None:
        for t, pp, rr, ff in zip(summary.thresholds, summary.precision, summary.recall,
                                 f_measure(summary.precision, summary.recall)):
            rows.append(f"all,{t:.6f},{pp:.6f},{rr:.6f},{ff:.6f}")
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def patch_descriptors(image: np.ndarray, points: np.ndarray, size: int = 7) -> np.ndarray:
    """Flattened raw color patches around (x, y) points, edge-replicated, scaled to [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.max(initial=0) > 1.0:
        img = img / 255.0
    r = size // 2
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    pts = np.asarray(points, dtype=np.int64).reshape(-1, 2)
    out = np.empty((len(pts), size * size * img.shape[2]))
    for k, (x, y) in enumerate(pts):
        out[k] = padded[y:y + size, x:x + size].reshape(-1)
    return out


def _nn_matches(img_a, img_b, pts_a, pts_b, radius, patch):
    da = patch_descriptors(img_a, pts_a, patch)
    db = patch_descriptors(img_b, pts_b, patch)
    tree = cKDTree(pts_b.astype(np.float64))
    near = tree.query_ball_point(pts_a.astype(np.float64), radius + 1e-9)
    target = np.full(len(pts_a), -1, dtype=np.int64)
    for i, js in enumerate(near):
        if not js:
            continue
        js = np.sort(np.asarray(js))
        d = np.sum((db[js] - da[i]) ** 2, axis=1)
        # exact descriptor ties go to the shortest displacement, then the lower index
        move = np.sum((pts_b[js] - pts_a[i]) ** 2, axis=1)
        target[i] = js[np.lexsort((js, move, d))[0]]
    return target


def baseline_greedy_nn(img_a, img_b, b1: np.ndarray, b2: np.ndarray,
                       radius: float = 100.0, patch: int = 7) -> FlowField:
    """Match each frame-t boundary pixel to its most similar patch on the frame-t+1 boundary."""
    pts_a = boundary_points(b1)
    pts_b = boundary_points(b2)
    if len(pts_a) == 0 or len(pts_b) == 0:
        return FlowField.empty()
    target = _nn_matches(img_a, img_b, pts_a, pts_b, radius, patch)
    ok = target >= 0
    return FlowField(pts_a[ok], (pts_b[target[ok]] - pts_a[ok]).astype(np.float64))


def ransac_translation(displacements: np.ndarray, iterations: int = 500,
                       inlier_radius: float = 3.0, seed: int = 0):
    """Best global translation hypothesis drawn from single putative matches.

    Returns (translation, inlier mask). The hypothesis with most inliers
    wins; earlier draws win ties.
    """
    d = np.asarray(displacements, dtype=np.float64).reshape(-1, 2)
    if len(d) == 0:
        raise ValueError("no putative matches")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(d), size=iterations)
    best, best_n = None, -1
    for k in picks:
        n = int(np.sum(np.sum((d - d[k]) ** 2, axis=1) <= inlier_radius ** 2))
        if n > best_n:
            best, best_n = d[k].copy(), n
    mask = np.sum((d - best) ** 2, axis=1) <= inlier_radius ** 2
    return best, mask


def baseline_ransac_translation(img_a, img_b, b1, b2, radius: float = 100.0, patch: int = 7,
                                iterations: int = 500, inlier_radius: float = 3.0,
                                seed: int = 0) -> FlowField:
    """One global translation fitted by RANSAC to nearest-descriptor matches."""
    nn = baseline_greedy_nn(img_a, img_b, b1, b2, radius, patch)
    if len(nn) == 0:
        return nn
    t, mask = ransac_translation(nn.flow, iterations, inlier_radius, seed)
    if mask.sum() == 0:
        log.warning("RANSAC found no inliers; using nearest-neighbour matches")
        return nn
    pts = boundary_points(b1)
    return FlowField(pts, np.repeat(t[None], len(pts), axis=0))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def boundary_report(summary: BenchmarkSummary, n_images: int) -> Dict[str, object]:
    return {"images": n_images, "ods": round(summary.ods, 6), "ois": round(summary.ois, 6),
            "ap": round(summary.ap, 6), "ods_threshold": round(summary.ods_threshold, 6),
            "ods_pooled": round(summary.ods_pooled, 6)}


def flow_report(per_method: Dict[str, List[float]]) -> Dict[str, object]:
    out = {}
    for name, vals in per_method.items():
        out[f"epe_{name}"] = round(float(np.mean(vals)), 6)
        out[f"pairs_{name}"] = len(vals)
    return out
