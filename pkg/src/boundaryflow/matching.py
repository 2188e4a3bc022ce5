"""Edgelet matching: candidates, similarity, filtering, greedy assignment, placement."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .evaluation import FlowField
from .segmentation import Edgelet

log = logging.getLogger(__name__)

# numerical slack on the angle test so exact 45-degree pairs are kept
ANGLE_SLACK_DEG = 1e-9


@dataclass(frozen=True)
class MatchParams:
    radius: float = 100.0
    top_k: int = 10
    max_angle: float = 45.0

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ValueError(f"top_k must be a positive integer, got {self.top_k}")
        if not 0 < self.max_angle <= 90:
            raise ValueError(f"max_angle must lie in (0, 90], got {self.max_angle}")


@dataclass(frozen=True)
class EdgeletMatch:
    source: int
    target: int
    score: float


# ---------------------------------------------------------------------------
# candidate pairs
# ---------------------------------------------------------------------------


def centroids(edgelets: Sequence[Edgelet]) -> np.ndarray:
    if not edgelets:
        return np.zeros((0, 2))
    return np.stack([e.centroid for e in edgelets])


def candidates(e: Edgelet | np.ndarray, targets: Sequence[Edgelet] | np.ndarray,
               params: MatchParams = MatchParams()) -> List[int]:
    """Indices of targets whose centroid lies within ``params.radius`` of ``e``'s."""
    c = e.centroid if isinstance(e, Edgelet) else np.asarray(e, dtype=np.float64)
    tc = targets if isinstance(targets, np.ndarray) else centroids(targets)
    if len(tc) == 0:
        return []
    d2 = np.sum((tc - c) ** 2, axis=1)
    return [int(j) for j in np.nonzero(d2 <= params.radius ** 2)[0]]


def edgelet_similarity(s: np.ndarray) -> float:
    """Mean of the pixel-pair score matrix."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("edgelet similarity needs non-empty edgelets")
    return float(s.mean())


def normal_angle(n1, n2) -> float:
    """Acute angle in degrees between two lines with unit normals n1, n2."""
    c = abs(float(np.dot(n1, n2))) / (np.linalg.norm(n1) * np.linalg.norm(n2))
    return float(np.degrees(np.arccos(min(1.0, c))))


def filter_top_k_and_angle(source_normal, scored: Sequence[Tuple[int, float]],
                           target_normals, params: MatchParams = MatchParams()
                           ) -> List[Tuple[int, float]]:
    """Keep the ``top_k`` best (higher score first, then lower index), then apply the angle rule."""
    ranked = sorted(scored, key=lambda t: (-t[1], t[0]))[:params.top_k]
    return [(j, sc) for j, sc in ranked
            if normal_angle(source_normal, target_normals[j]) <= params.max_angle + ANGLE_SLACK_DEG]


def greedy_match(pairs: Sequence[Tuple[int, int, float]]) -> List[EdgeletMatch]:
    """Repeatedly take the best remaining pair whose ends are both free."""
    order = sorted(pairs, key=lambda t: (-t[2], t[0], t[1]))
    used_s, used_t = set(), set()
    out = []
    for i, j, sc in order:
        if i in used_s or j in used_t:
            continue
        used_s.add(i)
        used_t.add(j)
        out.append(EdgeletMatch(int(i), int(j), float(sc)))
    return out


# ---------------------------------------------------------------------------
# pixel assignment
# ---------------------------------------------------------------------------


def monotone_alignment(s: np.ndarray) -> Tuple[np.ndarray, float]:
    """Non-decreasing map sigma maximizing sum_i s[i, sigma(i)].

    Ties resolve towards the smaller target position.
    """
    s = np.asarray(s, dtype=np.float64)
    n, m = s.shape
    if n == 0 or m == 0:
        raise ValueError("alignment needs two non-empty chains")
    best = np.empty((n, m))
    arg = np.empty((n, m), dtype=np.int64)
    best[0] = s[0]
    for i in range(1, n):
        # running max over j' <= j, keeping the first maximizer
        prev = best[i - 1]
        run = np.maximum.accumulate(prev)
        idx = np.zeros(m, dtype=np.int64)
        cur = 0
        for j in range(1, m):
            if prev[j] > prev[cur]:
                cur = j
            idx[j] = cur
        best[i] = s[i] + run
        arg[i] = idx
    sigma = np.empty(n, dtype=np.int64)
    sigma[-1] = int(np.argmax(best[-1]))
    for i in range(n - 1, 0, -1):
        sigma[i - 1] = arg[i, sigma[i]]
    return sigma, float(best[-1, sigma[-1]])


def pixel_assignment(s: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Order-preserving assignment of every source pixel to a target chain position.

    Returns (target positions along the target chain as given, flipped).
    The target chain is traversed in reverse when that scores strictly
    higher.
    """
    s = np.asarray(s, dtype=np.float64)
    sig, tot = monotone_alignment(s)
    sig_r, tot_r = monotone_alignment(s[:, ::-1])
    if tot_r > tot:
        return s.shape[1] - 1 - sig_r, True
    return sig, False


# ---------------------------------------------------------------------------
# side correction and placement
# ---------------------------------------------------------------------------


def region_colors(image: np.ndarray, sp: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    lab = np.asarray(sp).reshape(-1)
    k = int(lab.max()) + 1
    cnt = np.bincount(lab, minlength=k).astype(np.float64)
    means = np.stack([np.bincount(lab, img[:, c], minlength=k) for c in range(3)], 1)
    return means / np.maximum(cnt, 1)[:, None]


def color_distance(c1, c2) -> float:
    """Mean-RGB distance normalized to [0, 1]."""
    return float(np.linalg.norm(np.asarray(c1) - np.asarray(c2)) / (255.0 * np.sqrt(3)))


def side_pairing(e_a: Edgelet, e_b: Edgelet, colors_a: np.ndarray, colors_b: np.ndarray) -> str:
    """``"same"`` when region k of ``e_a`` corresponds to region k of ``e_b``, ``"cross"``
    when the sides are swapped and ``"tie"`` when color cannot tell."""
    a0, a1 = e_a.labels
    b0, b1 = e_b.labels
    same = color_distance(colors_a[a0], colors_b[b0]) + color_distance(colors_a[a1], colors_b[b1])
    cross = color_distance(colors_a[a0], colors_b[b1]) + color_distance(colors_a[a1], colors_b[b0])
    if same < cross:
        return "same"
    if cross < same:
        return "cross"
    return "tie"


def relocate(pixel, normal, sp: np.ndarray, region: int) -> np.ndarray:
    """Step a pixel across its edgelet along ``normal`` into ``region`` (at most 2 px)."""
    h, w = sp.shape
    x, y = int(pixel[0]), int(pixel[1])
    for step in (1.0, 2.0):
        nx = int(np.rint(x + step * normal[0]))
        ny = int(np.rint(y + step * normal[1]))
        if 0 <= nx < w and 0 <= ny < h and sp[ny, nx] == region:
            return np.array([nx, ny])
    nx = int(np.clip(np.rint(x + normal[0]), 0, w - 1))
    ny = int(np.clip(np.rint(y + normal[1]), 0, h - 1))
    return np.array([nx, ny])


def side_correct_and_place(match: EdgeletMatch, e_a: Edgelet, e_b: Edgelet,
                           sigma: np.ndarray, sp_a: np.ndarray, colors_a: np.ndarray,
                           colors_b: np.ndarray) -> FlowField:
    """Displacements for one matched edgelet pair.

    Source pixels sit on the smaller-label side of their edgelet, target
    pixels likewise. When the color pairing says the two smaller-label
    sides are different physical sides, the source pixel is moved across
    the edgelet so both ends lie on the same side.
    """
    side = side_pairing(e_a, e_b, colors_a, colors_b)
    src = e_a.pixels.copy()
    if side == "cross":
        src = np.stack([relocate(p, e_a.normal, sp_a, e_a.labels[1]) for p in e_a.pixels])
    elif side == "tie":
        log.info("ambiguous side pairing for edgelets %d -> %d; keeping original side",
                 match.source, match.target)
    tgt = e_b.pixels[sigma]
    return FlowField(src, (tgt - src).astype(np.float64),
                     np.full(len(src), match.source, dtype=np.int64))


def merge_fields(fields: Sequence[FlowField]) -> FlowField:
    """Concatenate fields; a pixel claimed twice keeps its first entry."""
    seen = set()
    pts, flow, src = [], [], []
    for f in fields:
        for p, v, s in zip(f.points, f.flow, f.source):
            key = (int(p[0]), int(p[1]))
            if key in seen:
                continue
            seen.add(key)
            pts.append(p)
            flow.append(v)
            src.append(s)
    if not pts:
        return FlowField.empty()
    return FlowField(np.array(pts), np.array(flow), np.array(src))


# ---------------------------------------------------------------------------
# full matcher
# ---------------------------------------------------------------------------


@dataclass
class MatchResult:
    matches: List[EdgeletMatch]
    field: FlowField
    pairs: List[Tuple[int, int, float]]


def match_edgelets(edgelets_a: Sequence[Edgelet], edgelets_b: Sequence[Edgelet], scores,
                   sp_a: np.ndarray, sp_b: np.ndarray, image_a, image_b,
                   params: MatchParams = MatchParams()) -> MatchResult:
    """Run candidate search, filtering, greedy matching and pixel placement.

    ``scores`` provides ``pair_matrix(chain_a, chain_b)`` for edgelet-level
    similarity and ``pixel_matrix(chain_a, chain_b)`` for alignment.
    """
    if not edgelets_a or not edgelets_b:
        return MatchResult([], FlowField.empty(), [])
    cb = centroids(edgelets_b)
    normals_b = [e.normal for e in edgelets_b]
    pairs = []
    for i, ea in enumerate(edgelets_a):
        scored = [(j, edgelet_similarity(scores.pair_matrix(ea.pixels, edgelets_b[j].pixels)))
                  for j in candidates(ea, cb, params)]
        for j, sc in filter_top_k_and_angle(ea.normal, scored, normals_b, params):
            pairs.append((i, j, sc))
    matches = greedy_match(pairs)
    colors_a = region_colors(image_a, sp_a)
    colors_b = region_colors(image_b, sp_b)
    fields = []
    for m in matches:
        ea, eb = edgelets_a[m.source], edgelets_b[m.target]
        sigma, _ = pixel_assignment(scores.pixel_matrix(ea.pixels, eb.pixels))
        fields.append(side_correct_and_place(m, ea, eb, sigma, sp_a, colors_a, colors_b))
    return MatchResult(matches, merge_fields(fields), pairs)


# ---------------------------------------------------------------------------
# match files
# ---------------------------------------------------------------------------


def format_matches(field: FlowField) -> str:
    """``x1 y1 x2 y2`` per entry, target rounded to the nearest pixel."""
    lines = []
    for (x, y), (u, v) in zip(field.points, field.flow):
        lines.append(f"{int(x)} {int(y)} {int(np.rint(x + u))} {int(np.rint(y + v))}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_matches(text: str) -> FlowField:
    rows = [line.split() for line in text.splitlines() if line.strip()]
    if not rows:
        return FlowField.empty()
    a = np.array([[int(t) for t in r] for r in rows], dtype=np.int64)
    if a.shape[1] != 4:
        raise ValueError("match lines must have four integers")
    return FlowField(a[:, :2], (a[:, 2:] - a[:, :2]).astype(np.float64))


def export_matches(field: FlowField, path, force: bool = True):
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    try:
        path.write_text(format_matches(field))
    except OSError as exc:
        raise OSError(f"cannot write match file {path}: {exc}") from exc


def read_matches(path) -> FlowField:
    return parse_matches(Path(path).read_text())
