"""Thinned boundaries, boundary-respecting superpixels and edgelets."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

_N4 = ((0, -1), (-1, 0), (1, 0), (0, 1))          # (dy, dx) in raster order
_N8 = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------


def ridge_normals(b: np.ndarray, sigma: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Unit vectors across the local ridge of ``b`` (direction of most negative curvature)."""
    s = ndimage.gaussian_filter(np.asarray(b, dtype=np.float64), sigma, mode="nearest")
    gy, gx = np.gradient(s)
    hyy, hyx = np.gradient(gy)
    hxy, hxx = np.gradient(gx)
    hxy = 0.5 * (hxy + hyx)
    # principal axis of the larger eigenvalue, rotated by 90 degrees
    theta = 0.5 * np.arctan2(2 * hxy, hxx - hyy) + np.pi / 2
    return np.cos(theta), np.sin(theta)


def nms_thin(b: np.ndarray, sigma: float = 1.0) -> np.ndarray:
    """Keep pixels that are >= both bilinear neighbours one pixel across the ridge.

    The comparison is non-strict, so plateaus survive. Surviving pixels keep
    their input value; all others become 0.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 2:
        raise ValueError(f"boundary map must be 2-D, got {b.shape}")
    nx, ny = ridge_normals(b, sigma)
    h, w = b.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fwd = ndimage.map_coordinates(b, [yy + ny, xx + nx], order=1, mode="nearest")
    bwd = ndimage.map_coordinates(b, [yy - ny, xx - nx], order=1, mode="nearest")
    # bilinear interpolation rounding must not break exact plateaus
    tol = 1e-12
    keep = (b >= fwd - tol) & (b >= bwd - tol) & (b > 0)
    return np.where(keep, b, 0.0)


# ---------------------------------------------------------------------------
# oversegmentation
# ---------------------------------------------------------------------------


def _grid_seeds(h, w, spacing):
    off = spacing // 2
    return [(y, x) for y in range(off, h, spacing) for x in range(off, w, spacing)]


def _region_means(labels, image, n, mask=None):
    img = np.asarray(image, dtype=np.float64).reshape(-1, image.shape[-1] if image.ndim == 3 else 1)
    lab = labels.reshape(-1)
    sel = lab >= 0 if mask is None else (lab >= 0) & mask.reshape(-1)
    counts = np.bincount(lab[sel], minlength=n).astype(np.float64)
    means = np.stack([np.bincount(lab[sel], img[sel, c], minlength=n)
                      for c in range(img.shape[1])], 1)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = means / counts[:, None]
    return means, counts


def oversegment(thin: np.ndarray, image: np.ndarray, seed_spacing: int = 16,
                threshold: float = 0.5, min_pocket: int | None = None) -> np.ndarray:
    """Label map whose region borders follow the thresholded boundary.

    Regions grow by breadth-first flood fill from a regular seed grid over
    the non-boundary pixels. Unseeded pockets larger than ``min_pocket``
    (default ``seed_spacing**2 // 4``) become regions of their own; smaller
    ones are merged into the adjacent region of closest mean color. Boundary
    pixels are finally given to the adjacent region of closest mean color.
    Labels are renumbered 0..K-1 in raster order of first appearance.
    """
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if seed_spacing < 1:
        raise ValueError("seed_spacing must be positive")
    thin = np.asarray(thin, dtype=np.float64)
    h, w = thin.shape
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape} and boundary {thin.shape} sizes differ")
    min_pocket = seed_spacing ** 2 // 4 if min_pocket is None else min_pocket
    wall = thin >= threshold
    seeds = [(y, x) for (y, x) in _grid_seeds(h, w, seed_spacing) if not wall[y, x]]
    if not seeds and wall.all():
        log.warning("every pixel is a boundary pixel; falling back to grid cells")
        gy = np.arange(h)[:, None] // seed_spacing
        gx = np.arange(w)[None, :] // seed_spacing
        cells = gy * ((w + seed_spacing - 1) // seed_spacing) + gx
        return _renumber(cells)

    labels = np.full((h, w), -1, dtype=np.int64)
    queue = deque()
    for k, (y, x) in enumerate(seeds):
        labels[y, x] = k
        queue.append((y, x))
    _flood(labels, queue, ~wall)
    nxt = len(seeds)

    # every unreached open pocket gets a provisional label of its own
    pockets, npk = ndimage.label((labels < 0) & ~wall)
    pocket_ids = []
    if npk:
        for pid, sl in enumerate(ndimage.find_objects(pockets), 1):
            sel = pockets[sl] == pid
            labels[sl][sel] = nxt
            pocket_ids.append((nxt, int(sel.sum())))
            nxt += 1

    means, _ = _region_means(labels, image, nxt)
    _assign_walls(labels, wall, image, means)

    small = [lab for lab, size in pocket_ids if size < min_pocket]
    if small:
        _merge_small(labels, image, set(small), nxt)
    return _renumber(labels)


def _flood(labels, queue, open_mask):
    h, w = labels.shape
    while queue:
        y, x = queue.popleft()
        k = labels[y, x]
        for dy, dx in _N4:
            yy, xx = y + dy, x + dx
            if 0 <= yy < h and 0 <= xx < w and labels[yy, xx] < 0 and open_mask[yy, xx]:
                labels[yy, xx] = k
                queue.append((yy, xx))


def _assign_walls(labels, wall, image, means):
    """Give each boundary pixel to a 4-adjacent region, closest mean color first."""
    h, w = labels.shape
    pending = wall & (labels < 0)
    while pending.any():
        ys, xs = np.nonzero(pending)
        changes = []
        for y, x in zip(ys, xs):
            best, best_d = -1, np.inf
            for dy, dx in _N4:
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w:
                    k = labels[yy, xx]
                    if k >= 0:
                        m = means[k]
                        d = np.inf if np.isnan(m).any() else float(np.sum((image[y, x] - m) ** 2))
                        if d < best_d or (d == best_d and best >= 0 and k < best) or best < 0:
                            best, best_d = k, d
            if best >= 0:
                changes.append((y, x, best))
        if not changes:
            # isolated wall islands with no open neighbour: give them one label
            extra = labels.max() + 1
            isl, n = ndimage.label(pending)
            labels[pending] = extra + isl[pending] - 1
            break
        for y, x, k in changes:
            labels[y, x] = k
            pending[y, x] = False


def _merge_small(labels, image, small, n):
    """Merge each small region into its 4-adjacent region of closest mean color."""
    while small:
        means, counts = _region_means(labels, image, labels.max() + 1)
        target = {}
        for lab in sorted(small):
            mask = labels == lab
            if not mask.any():
                continue
            ring = ndimage.binary_dilation(mask) & ~mask
            nbrs = np.unique(labels[ring])
            nbrs = [k for k in nbrs if k >= 0 and k != lab]
            if not nbrs:
                continue
            d = [np.sum((means[lab] - means[k]) ** 2) for k in nbrs]
            target[lab] = nbrs[int(np.argmin(d))]
        if not target:
            break
        # apply one merge at a time to keep chains of small pockets consistent
        lab = min(target)
        labels[labels == lab] = target[lab]
        small.discard(lab)


def _renumber(labels):
    flat = labels.reshape(-1)
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    lut = {int(v): i for i, v in enumerate(order)}
    return np.vectorize(lut.__getitem__, otypes=[np.int64])(labels)


# ---------------------------------------------------------------------------
# edgelets
# ---------------------------------------------------------------------------


@dataclass
class Edgelet:
    """Ordered chain of border pixels between two regions.

    ``pixels`` are (x, y) and lie in region ``labels[0]`` (the smaller label),
    each with a 4-neighbour in ``labels[1]``. ``normal`` points from the
    first region towards the second.
    """

    pixels: np.ndarray
    labels: Tuple[int, int]
    normal: np.ndarray
    frame: int = 0

    def __len__(self):
        return len(self.pixels)

    @property
    def centroid(self) -> np.ndarray:
        return self.pixels.mean(axis=0)


def border_pixels(sp: np.ndarray):
    """Map (a, b), a < b, to the set of pixels of region a that 4-touch region b."""
    h, w = sp.shape
    pairs = {}
    for dy, dx in _N4:
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        ys2 = slice(max(0, dy), h - max(0, -dy))
        xs2 = slice(max(0, dx), w - max(0, -dx))
        a = sp[ys, xs]
        b = sp[ys2, xs2]
        sel = a < b
        yy, xx = np.nonzero(sel)
        yy = yy + ys.start
        xx = xx + xs.start
        for y, x, la, lb in zip(yy, xx, a[sel], b[sel]):
            pairs.setdefault((int(la), int(lb)), set()).add((int(x), int(y)))
    return pairs


def _order_chain(pix: List[Tuple[int, int]]) -> List[np.ndarray]:
    """Walk an 8-connected pixel set from one extreme end to the other.

    A branched set has no single walk; whenever the walk gets stuck it
    restarts at the closest unvisited pixel, and each uninterrupted stretch
    is returned as its own 8-connected run.
    """
    pset = set(pix)

    def bfs(start):
        dist = {start: 0}
        q = deque([start])
        while q:
            p = q.popleft()
            for dy, dx in _N8:
                n = (p[0] + dx, p[1] + dy)
                if n in pset and n not in dist:
                    dist[n] = dist[p] + 1
                    q.append(n)
        return dist

    first = min(pix, key=lambda p: (p[1], p[0]))
    d0 = bfs(first)
    end = max(d0, key=lambda p: (d0[p], -p[1], -p[0]))
    dist = bfs(end)
    runs = [[end]]
    seen = {end}
    cur = end
    while len(seen) < len(pix):
        nbrs = [(cur[0] + dx, cur[1] + dy) for dy, dx in _N8]
        cand = [n for n in nbrs if n in pset and n not in seen]
        if cand:
            # prefer 4-neighbours, then the one closest to the start of the walk
            cand.sort(key=lambda n: (abs(n[0] - cur[0]) + abs(n[1] - cur[1]), dist[n], n[1], n[0]))
            cur = cand[0]
        else:
            rest = [p for p in pix if p not in seen]
            cur = min(rest, key=lambda p: ((p[0] - cur[0]) ** 2 + (p[1] - cur[1]) ** 2,
                                          dist[p], p[1], p[0]))
            runs.append([])
        runs[-1].append(cur)
        seen.add(cur)
    return [np.asarray(r, dtype=np.int64) for r in runs]


def extract_edgelets(sp: np.ndarray, min_length: int = 3, frame: int = 0) -> List[Edgelet]:
    """One edgelet per adjacent region pair and 8-connected border component.

    Branched components are split into unbranched runs; every run shorter
    than ``min_length`` is dropped.
    """
    sp = np.asarray(sp)
    out = []
    for (a, b), pix in sorted(border_pixels(sp).items()):
        pix = sorted(pix, key=lambda p: (p[1], p[0]))
        mask = np.zeros(sp.shape, dtype=bool)
        xs = np.array([p[0] for p in pix])
        ys = np.array([p[1] for p in pix])
        mask[ys, xs] = True
        comp, n = ndimage.label(mask, structure=np.ones((3, 3)))
        for c in range(1, n + 1):
            sel = comp[ys, xs] == c
            if sel.sum() < min_length:
                continue
            for chain in _order_chain([(int(x), int(y)) for x, y in zip(xs[sel], ys[sel])]):
                if len(chain) < min_length:
                    continue
                e = Edgelet(chain, (a, b), np.zeros(2), frame)
                e.normal = compute_normal(e, sp)
                out.append(e)
    return out


def compute_normal(e: Edgelet, sp: np.ndarray) -> np.ndarray:
    """Mean offset from each chain pixel to its nearest pixel(s) of the second region."""
    a, b = e.labels
    h, w = sp.shape
    acc = np.zeros(2)
    for x, y in e.pixels:
        best, offs = np.inf, []
        for r in (1, 2):
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    xx, yy = x + dx, y + dy
                    if 0 <= xx < w and 0 <= yy < h and sp[yy, xx] == b:
                        d = dx * dx + dy * dy
                        if d < best:
                            best, offs = d, [(dx, dy)]
                        elif d == best and (dx, dy) not in offs:
                            offs.append((dx, dy))
            if offs:
                break
        if offs:
            acc += np.mean(np.asarray(offs, dtype=np.float64), axis=0)
    n = np.hypot(*acc)
    if n < 1e-12:
        d = (e.pixels[-1] - e.pixels[0]).astype(np.float64)
        perp = np.array([-d[1], d[0]])
        pn = np.hypot(*perp)
        return perp / pn if pn > 0 else np.array([1.0, 0.0])
    return acc / n


def format_edgelets(edgelets: List[Edgelet]) -> str:
    """Text dump: ``frame label_a label_b nx ny n x1 y1 x2 y2 ...`` per line."""
    lines = []
    for e in edgelets:
        coords = " ".join(f"{x} {y}" for x, y in e.pixels)
        nx, ny = float(e.normal[0]), float(e.normal[1])
        lines.append(f"{e.frame} {e.labels[0]} {e.labels[1]} {nx!r} {ny!r} {len(e)} {coords}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_edgelets(text: str) -> List[Edgelet]:
    out = []
    for line in text.splitlines():
        if not line.strip():
            continue
        t = line.split()
        n = int(t[5])
        coords = np.asarray([int(v) for v in t[6:6 + 2 * n]], dtype=np.int64).reshape(n, 2)
        out.append(Edgelet(coords, (int(t[1]), int(t[2])),
                           np.array([float(t[3]), float(t[4])]), int(t[0])))
    return out
