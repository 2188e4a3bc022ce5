"""Ground-truth boundary flow and the synthetic layered-scene generator.

Boundary flow of a frame-t boundary pixel ``x``:

* flow defined at ``x``: the displacement from ``x`` to the frame-(t+1)
  boundary pixel nearest to ``x + OF(x)``;
* flow undefined (``x`` occluded): the flow of the nearest pixel whose flow
  is defined;
* undefined when either nearest-point query has more than one solution.

Pixel ``(x, y)`` has its center at integer coordinates; points are (x, y).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

# reasons attached to undefined entries
TIE_MATCH = "tie-nearest-boundary"
TIE_OCCLUDED = "tie-nearest-valid"
NO_BOUNDARY = "empty-B2"
NO_VALID = "no-valid-flow"
CASE_FLOW = 1
CASE_OCCLUDED = 2


@dataclass
class DenseFlow:
    """Per-pixel (dx, dy) in float32 with a validity mask."""

    uv: np.ndarray                   # (H, W, 2) float32
    valid: np.ndarray                # (H, W) bool

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.uv.shape[:2] != self.valid.shape or self.uv.shape[2:] != (2,):
            raise ValueError(f"flow {self.uv.shape} and mask {self.valid.shape} disagree")
        if not np.all(np.isfinite(self.uv[self.valid])):
            raise ValueError("flow must be finite where valid")

    @property
    def shape(self):
        return self.valid.shape


@dataclass
class BfGroundTruth:
    """Boundary flow for the frame-t boundary pixels, in input order."""

    points: np.ndarray               # (n, 2) int (x, y)
    flow: np.ndarray                 # (n, 2) float64, NaN where undefined
    case: np.ndarray                 # (n,) int8: 1, 2, or 0 when undefined
    reason: List[str]                # "" for defined entries

    @property
    def defined(self) -> np.ndarray:
        return self.case > 0

    def __len__(self):
        return len(self.points)

    def as_dict(self):
        return {(int(x), int(y)): (tuple(f) if c else None)
                for (x, y), f, c in zip(self.points, self.flow, self.case)}

    def to_text(self) -> str:
        lines = []
        for (x, y), (dx, dy), c, r in zip(self.points, self.flow, self.case, self.reason):
            if c:
                lines.append(f"{x} {y} {c} {float(dx)!r} {float(dy)!r}")
            else:
                lines.append(f"{x} {y} 0 undefined {r}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "BfGroundTruth":
        pts, flow, case, reason = [], [], [], []
        for line in text.splitlines():
            if not line.strip():
                continue
            parts = line.split()
            pts.append((int(parts[0]), int(parts[1])))
            c = int(parts[2])
            case.append(c)
            if c:
                flow.append((float(parts[3]), float(parts[4])))
                reason.append("")
            else:
                flow.append((np.nan, np.nan))
                reason.append(parts[4] if len(parts) > 4 else "")
        return cls(np.asarray(pts, dtype=np.int64).reshape(-1, 2),
                   np.asarray(flow, dtype=np.float64).reshape(-1, 2),
                   np.asarray(case, dtype=np.int8), reason)


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Row-major list of (x, y) coordinates of a boolean mask."""
    ys, xs = np.nonzero(mask)
    return np.stack([xs, ys], axis=1).astype(np.int64)


def _unique_nearest(tree: cKDTree, pts: np.ndarray, queries: np.ndarray):
    """Nearest neighbour with exact tie detection.

    Returns (index, unique flag). Candidates come from the tree; the minimum
    and its multiplicity are then decided on squared distances recomputed in
    float64 so that ties are exact.
    """
    d, _ = tree.query(queries, k=1)
    out = np.full(len(queries), -1, dtype=np.int64)
    unique = np.zeros(len(queries), dtype=bool)
    # small absolute slack only widens the candidate set; the decision is exact
    for qi, (q, r) in enumerate(zip(queries, d)):
        cand = tree.query_ball_point(q, r * (1 + 1e-9) + 1e-9)
        cand = np.asarray(cand, dtype=np.int64)
        diff = pts[cand] - q
        d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
        best = d2.min()
        hit = cand[d2 == best]
        out[qi] = hit.min()
        unique[qi] = len(hit) == 1
    return out, unique


def bf_oracle(b1: np.ndarray, b2: np.ndarray, flow: DenseFlow,
              occluded_domain: str = "boundary") -> BfGroundTruth:
    """Boundary flow for every pixel of the frame-t boundary mask ``b1``.

    ``occluded_domain`` selects where the nearest valid-flow pixel is looked
    for when a boundary pixel is occluded: ``"boundary"`` (frame-t boundary
    pixels with valid flow) or ``"all"`` (any pixel with valid flow).
    """
    b1 = np.asarray(b1, bool)
    b2 = np.asarray(b2, bool)
    if b1.shape != b2.shape or b1.shape != flow.shape:
        raise ValueError(f"size mismatch: B1 {b1.shape}, B2 {b2.shape}, flow {flow.shape}")
    if occluded_domain not in ("boundary", "all"):
        raise ValueError(f"occluded_domain must be 'boundary' or 'all', got {occluded_domain!r}")
    p1 = boundary_points(b1)
    n = len(p1)
    res = np.full((n, 2), np.nan)
    case = np.zeros(n, dtype=np.int8)
    reason = [""] * n
    if n == 0:
        return BfGroundTruth(p1, res, case, reason)
    uv = flow.uv.astype(np.float64)
    valid_at = flow.valid[p1[:, 1], p1[:, 0]]
    p2 = boundary_points(b2)

    has = np.nonzero(valid_at)[0]
    if len(has):
        if len(p2) == 0:
            for i in has:
                reason[i] = NO_BOUNDARY
        else:
            target = p1[has] + uv[p1[has, 1], p1[has, 0]]
            idx, uniq = _unique_nearest(cKDTree(p2), p2.astype(np.float64), target)
            for i, j, u in zip(has, idx, uniq):
                if u:
                    res[i] = p2[j] - p1[i]
                    case[i] = CASE_FLOW
                else:
                    reason[i] = TIE_MATCH

    occ = np.nonzero(~valid_at)[0]
    if len(occ):
        domain = (b1 if occluded_domain == "boundary" else np.ones_like(b1)) & flow.valid
        pv = boundary_points(domain)
        if len(pv) == 0:
            for i in occ:
                reason[i] = NO_VALID
        else:
            idx, uniq = _unique_nearest(cKDTree(pv), pv.astype(np.float64),
                                        p1[occ].astype(np.float64))
            for i, j, u in zip(occ, idx, uniq):
                if u:
                    y = pv[j]
                    res[i] = uv[y[1], y[0]]
                    case[i] = CASE_OCCLUDED
                else:
                    reason[i] = TIE_OCCLUDED
    return BfGroundTruth(p1, res, case, reason)


def check_ground_truth(gt: BfGroundTruth, b2: np.ndarray) -> None:
    """Assert the landing invariant of flow-defined entries."""
    b2 = np.asarray(b2, bool)
    sel = gt.case == CASE_FLOW
    end = gt.points[sel] + gt.flow[sel]
    if not np.all(end == np.round(end)):
        raise AssertionError("case-(i) endpoint is not a pixel")
    end = end.astype(np.int64)
    if not np.all(b2[end[:, 1], end[:, 0]]):
        raise AssertionError("case-(i) endpoint does not land on B2")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


@dataclass
class Shape:
    """A rigid polygon or disk with a per-frame motion.

    ``vertices`` are in the shape's local frame (convex, counter-clockwise
    in image coordinates is not required); ``radius`` is used for disks.
    """

    kind: str                        # "polygon" or "disk"
    color: Tuple[float, float, float]
    center: Tuple[float, float]
    angle: float = 0.0               # radians
    translation: Tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0            # radians per frame
    vertices: np.ndarray | None = None
    radius: float = 0.0

    def __post_init__(self):
        if self.kind == "polygon":
            v = np.asarray(self.vertices, dtype=np.float64)
            if v.ndim != 2 or v.shape[0] < 3 or v.shape[1] != 2:
                raise ValueError("polygon needs at least 3 vertices")
            area = 0.5 * abs(np.sum(v[:, 0] * np.roll(v[:, 1], -1) - np.roll(v[:, 0], -1) * v[:, 1]))
            if area <= 0:
                raise ValueError("degenerate polygon (zero area)")
            self.vertices = v
        elif self.kind == "disk":
            if not self.radius > 0:
                raise ValueError("degenerate disk (zero radius)")
        else:
            raise ValueError(f"unknown shape kind {self.kind!r}")

    def pose(self, frame: int):
        c = np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.translation)
        return c, self.angle + frame * self.rotation

    def contains(self, px: np.ndarray, py: np.ndarray, frame: int) -> np.ndarray:
        """Point-in-shape test for image points (px, py) at ``frame``."""
        (cx, cy), a = self.pose(frame)
        ca, sa = np.cos(a), np.sin(a)
        dx, dy = px - cx, py - cy
        lx = ca * dx + sa * dy
        ly = -sa * dx + ca * dy
        if self.kind == "disk":
            return lx * lx + ly * ly <= self.radius * self.radius
        v = self.vertices
        inside = np.zeros(np.broadcast(lx, ly).shape, dtype=bool)
        j = len(v) - 1
        for i in range(len(v)):
            xi, yi = v[i]
            xj, yj = v[j]
            crosses = (yi > ly) != (yj > ly)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = (xj - xi) * (ly - yi) / (yj - yi) + xi
            inside ^= crosses & (lx < xint)
            j = i
        return inside

    def motion(self, px, py):
        """Image position at t+1 of the material point at (px, py) at t."""
        (c0x, c0y), _ = self.pose(0)
        (c1x, c1y), _ = self.pose(1)
        cr, sr = np.cos(self.rotation), np.sin(self.rotation)
        dx, dy = px - c0x, py - c0y
        return c1x + cr * dx - sr * dy, c1y + sr * dx + cr * dy


@dataclass
class Scene:
    """Back-to-front list of shapes over a static textured background."""

    size: Tuple[int, int]            # (H, W)
    shapes: List[Shape]
    background: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture: float = 0.0             # amplitude of the static background texture
    noise: float = 0.0               # per-frame pixel noise std
    seed: int = 0

    def labels(self, frame: int, px=None, py=None) -> np.ndarray:
        """Index of the topmost shape covering each point; -1 is background."""
        if px is None:
            h, w = self.size
            py, px = np.mgrid[0:h, 0:w].astype(np.float64)
        lab = np.full(np.shape(px), -1, dtype=np.int64)
        for k, s in enumerate(self.shapes):
            lab[s.contains(px, py, frame)] = k
        return lab


def _texture(size, amplitude, rng):
    from scipy.ndimage import gaussian_filter
    h, w = size
    field_ = np.stack([gaussian_filter(rng.standard_normal((h, w)), 1.5) for _ in range(3)], -1)
    field_ /= field_.std() + 1e-12
    return amplitude * field_


def render_scene(scene: Scene, frame: int):
    """Rasterize one frame.

    Returns (image uint8 (H, W, 3), boundary mask, DenseFlow, label map).
    The boundary is the set of pixels of a shape with a 4-neighbour lying
    on something behind it; the flow (defined for frame 0 only, zero and
    fully invalid for frame 1) is the analytic motion of the topmost
    surface, valid where that surface is still visible at t+1.
    """
    if frame not in (0, 1):
        raise ValueError("frame must be 0 (t) or 1 (t+1)")
    h, w = scene.size
    rng = np.random.default_rng([scene.seed, 7])
    tex = _texture(scene.size, scene.texture, rng) if scene.texture > 0 else 0.0
    lab = scene.labels(frame)
    img = np.empty((h, w, 3))
    img[:] = np.asarray(scene.background) + tex
    for k, s in enumerate(scene.shapes):
        img[lab == k] = s.color
    if scene.noise > 0:
        nrng = np.random.default_rng([scene.seed, 11, frame])
        img = img + nrng.normal(0, scene.noise, img.shape)
    image = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8)
    boundary = boundary_from_labels(lab)

    py, px = np.mgrid[0:h, 0:w].astype(np.float64)
    uv = np.zeros((h, w, 2), dtype=np.float64)
    valid = np.zeros((h, w), dtype=bool)
    if frame == 0:
        qx, qy = px.copy(), py.copy()
        for k, s in enumerate(scene.shapes):
            sel = lab == k
            mx, my = s.motion(px[sel], py[sel])
            qx[sel], qy[sel] = mx, my
        uv = np.stack([qx - px, qy - py], axis=-1)
        inb = (qx >= -0.5) & (qx < w - 0.5) & (qy >= -0.5) & (qy < h - 0.5)
        lab1 = scene.labels(1, qx, qy)
        valid = inb & (lab1 == lab)
    return image, boundary, DenseFlow(uv.astype(np.float32), valid), lab


def boundary_from_labels(lab: np.ndarray) -> np.ndarray:
    """Pixels of a shape that touch (4-neighbourhood) a layer behind them."""
    depth = lab  # background is -1, later shapes are in front
    out = np.zeros(lab.shape, dtype=bool)
    inner = depth >= 0
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb = np.roll(depth, shift, axis=axis)
        ok = np.ones_like(out)
        if axis == 0:
            if shift == 1:
                ok[0, :] = False
            else:
                ok[-1, :] = False
        else:
            if shift == 1:
                ok[:, 0] = False
            else:
                ok[:, -1] = False
        out |= inner & ok & (nb < depth)
    return out


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Difficulty:
    """Knobs of the scene sampler."""

    n_shapes: Tuple[int, int] = (2, 3)          # inclusive range
    shape_size: Tuple[float, float] = (9.0, 15.0)  # radius-like extent, px
    max_translation: float = 8.0
    max_rotation_deg: float = 12.0
    texture: float = 0.06
    noise: float = 0.01
    min_moving: int = 1
    integer_translation: bool = True


@dataclass
class Sample:
    """One training / evaluation pair with its ground truth."""

    scene: Scene
    kind: str
    frame_a: np.ndarray
    frame_b: np.ndarray
    boundary_a: np.ndarray
    boundary_b: np.ndarray
    flow: DenseFlow
    bf: BfGroundTruth
    labels_a: np.ndarray = field(repr=False, default=None)
    labels_b: np.ndarray = field(repr=False, default=None)


SCENE_KINDS = ("translation", "rotation", "occlusion")


def _random_color(rng, avoid):
    for _ in range(50):
        c = rng.uniform(0.05, 0.95, 3)
        if all(np.linalg.norm(c - a) > 0.35 for a in avoid):
            return tuple(c)
    return tuple(c)


def _random_shape(rng, size, diff: Difficulty, colors, kind_motion, static=False):
    h, w = size
    r = rng.uniform(*diff.shape_size)
    margin = r + diff.max_translation + 2
    cx = rng.uniform(margin, w - margin) if w > 2 * margin else w / 2
    cy = rng.uniform(margin, h - margin) if h > 2 * margin else h / 2
    color = _random_color(rng, colors)
    if static:
        t, rot = (0.0, 0.0), 0.0
    else:
        for _ in range(20):
            t = rng.uniform(-diff.max_translation, diff.max_translation, 2)
            if diff.integer_translation:
                t = np.rint(t)
            if np.hypot(*t) >= 2:
                break
        t = (float(t[0]), float(t[1]))
        rot = 0.0
        if kind_motion == "rotation":
            rot = float(np.deg2rad(rng.uniform(4, diff.max_rotation_deg)) * rng.choice([-1, 1]))
    if rng.random() < 0.35:
        return Shape("disk", color, (cx, cy), 0.0, t, rot, radius=r)
    nv = int(rng.integers(3, 7))
    if rng.random() < 0.5 or nv == 4:
        a, b = r * rng.uniform(0.7, 1.0, 2)
        verts = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
    else:
        ang = np.linspace(0, 2 * np.pi, nv, endpoint=False) + rng.uniform(-0.3, 0.3, nv)
        rad = r * rng.uniform(0.75, 1.0, nv)
        verts = np.stack([rad * np.cos(ang), rad * np.sin(ang)], 1)
    angle = float(rng.uniform(0, np.pi)) if kind_motion != "translation" or rng.random() < 0.5 else 0.0
    return Shape("polygon", color, (cx, cy), angle, t, rot, vertices=verts)


def random_scene(rng: np.random.Generator, size=(64, 64), kind: str = "translation",
                 difficulty: Difficulty | None = None) -> Scene:
    diff = difficulty or Difficulty()
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}")
    n = int(rng.integers(diff.n_shapes[0], diff.n_shapes[1] + 1))
    n = max(n, diff.min_moving + (1 if kind == "occlusion" else 0))
    bg = tuple(rng.uniform(0.2, 0.8, 3))
    colors = [np.asarray(bg)]
    shapes = []
    for k in range(n):
        static = kind == "occlusion" and k == n - 1
        s = _random_shape(rng, size, diff, colors, kind, static=static)
        colors.append(np.asarray(s.color))
        shapes.append(s)
    return Scene(tuple(size), shapes, bg, diff.texture, diff.noise,
                 seed=int(rng.integers(0, 2**31)))


def make_sample(scene: Scene, kind: str = "") -> Sample:
    img0, b0, flow, lab0 = render_scene(scene, 0)
    img1, b1, _, lab1 = render_scene(scene, 1)
    gt = bf_oracle(b0, b1, flow)
    check_ground_truth(gt, b1)
    return Sample(scene, kind, img0, img1, b0, b1, flow, gt, lab0, lab1)


def scene_kinds(n: int) -> List[str]:
    """Deterministic 60/20/20 translation/rotation/occlusion schedule."""
    pattern = ["translation"] * 3 + ["rotation", "occlusion"]
    return [pattern[i % 5] for i in range(n)]


def generate_dataset(n: int, seed: int, size=(64, 64),
                     difficulty: Difficulty | None = None) -> List[Sample]:
    """``n`` scenes in a fixed 60/20/20 mix, reproducible from ``seed``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n)
    out = []
    for kind, ss in zip(scene_kinds(n), children):
        rng = np.random.default_rng(ss)
        out.append(make_sample(random_scene(rng, size, kind, difficulty), kind))
    return out
