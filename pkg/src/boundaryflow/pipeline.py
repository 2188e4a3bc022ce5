"""End-to-end boundary flow estimation and the on-disk dataset layout."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence

import numpy as np
from scipy import ndimage

from . import io
from .evaluation import FlowField
from .excitation import Excitation, pixel_scores
from .fcsn import Fcsn
from .matching import MatchParams, MatchResult, match_edgelets
from .oracle import BfGroundTruth, DenseFlow, Sample
from .segmentation import Edgelet, extract_edgelets, nms_thin, oversegment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SegmentParams:
    seed_spacing: int = 16
    threshold: float = 0.5
    min_length: int = 3
    # fraction of an edgelet's pixels that must touch the thresholded boundary
    min_support: float = 0.5
    # flood against the raw map next to the thinned ridge, closing NMS gaps
    close_gaps: bool = True


@dataclass
class FrameAnalysis:
    prob: np.ndarray
    thin: np.ndarray
    superpixels: np.ndarray
    edgelets: List[Edgelet]


@dataclass
class FlowEstimate:
    field: FlowField
    frames: List[FrameAnalysis]
    result: MatchResult


def supported_edgelets(edgelets: Sequence[Edgelet], wall: np.ndarray,
                       min_support: float) -> List[Edgelet]:
    """Edgelets with enough pixels on or next to the thresholded boundary.

    Region borders also form where flood fronts from neighbouring seeds
    meet inside an open area; those carry no boundary evidence.
    """
    near = ndimage.binary_dilation(wall, structure=np.ones((3, 3), bool))
    keep = []
    for e in edgelets:
        if near[e.pixels[:, 1], e.pixels[:, 0]].mean() >= min_support:
            keep.append(e)
    return keep


def wall_map(prob: np.ndarray, thin: np.ndarray, threshold: float) -> np.ndarray:
    """Thinned map with raw values restored within 1 px of the kept ridge.

    NMS drops single pixels at corners and junctions, and a 4-connected flood
    leaks through such holes. Restoring the raw map beside the ridge seals
    them without adding walls away from detected boundaries.
    """
    near = ndimage.binary_dilation(thin >= threshold, structure=np.ones((3, 3), bool))
    return np.where(near, prob, thin)


def analyze_frame(prob: np.ndarray, image: np.ndarray, frame: int,
                  seg: SegmentParams = SegmentParams()) -> FrameAnalysis:
    thin = nms_thin(prob)
    wall = wall_map(prob, thin, seg.threshold) if seg.close_gaps else thin
    sp = oversegment(wall, image, seg.seed_spacing, seg.threshold)
    edgelets = extract_edgelets(sp, seg.min_length, frame)
    edgelets = supported_edgelets(edgelets, thin >= seg.threshold, seg.min_support)
    return FrameAnalysis(prob, thin, sp, edgelets)


def estimate_flow(net: Fcsn, img_a: np.ndarray, img_b: np.ndarray,
                  params: MatchParams = MatchParams(),
                  seg: SegmentParams = SegmentParams()) -> FlowEstimate:
    """Detect boundaries in both frames and match their edgelets."""
    out = net.forward_pair(img_a, img_b)
    frames = [analyze_frame(out.pred_a[0], img_a, 0, seg),
              analyze_frame(out.pred_b[0], img_b, 1, seg)]
    ea, eb = frames[0].edgelets, frames[1].edgelets
    if not ea or not eb:
        log.warning("no edgelets detected (%d in frame 0, %d in frame 1)", len(ea), len(eb))
        return FlowEstimate(FlowField.empty(), frames, MatchResult([], FlowField.empty(), []))
    pix_a = np.unique(np.concatenate([e.pixels for e in ea]), axis=0)
    pix_b = np.unique(np.concatenate([e.pixels for e in eb]), axis=0)
    scores = pixel_scores(Excitation(net, out), pix_a, pix_b)
    res = match_edgelets(ea, eb, scores, frames[0].superpixels, frames[1].superpixels,
                         img_a, img_b, params)
    return FlowEstimate(res.field, frames, res)


# ---------------------------------------------------------------------------
# datasets on disk
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"


@dataclass
class PairRecord:
    """A dataset entry as stored on disk."""

    name: str
    kind: str
    frame_a: np.ndarray
    frame_b: np.ndarray
    boundary_a: np.ndarray
    boundary_b: np.ndarray
    flow: DenseFlow
    bf: BfGroundTruth = field(repr=False)


def as_record(sample: Sample, name: str) -> PairRecord:
    return PairRecord(name, sample.kind, sample.frame_a, sample.frame_b, sample.boundary_a,
                      sample.boundary_b, sample.flow, sample.bf)


def write_record(rec: PairRecord, root, force: bool = False):
    d = Path(root) / rec.name
    io.write_ppm(d / "frame0.ppm", rec.frame_a, force=force)
    io.write_ppm(d / "frame1.ppm", rec.frame_b, force=force)
    io.write_pgm(d / "boundary0.pgm", rec.boundary_a.astype(np.uint8) * 255, force=force)
    io.write_pgm(d / "boundary1.pgm", rec.boundary_b.astype(np.uint8) * 255, force=force)
    io.write_flo(d / "flow.flo", rec.flow.uv, rec.flow.valid, force=force)
    path = d / "bf.txt"
    if path.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {path} (use --force)")
    path.write_text(rec.bf.to_text())


def write_dataset(records: Sequence[PairRecord], root, force: bool = False):
    root = Path(root)
    manifest = root / MANIFEST
    if manifest.exists() and not force:
        raise FileExistsError(f"refusing to overwrite {manifest} (use --force)")
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    for rec in records:
        write_record(rec, root, force)
    manifest.write_text("".join(f"{r.name} {r.kind}\n" for r in records))


def read_manifest(root) -> List[tuple]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'name kind'")
        rows.append((parts[0], parts[1]))
    return rows


def read_record(root, name: str, kind: str = "") -> PairRecord:
    d = Path(root) / name
    if not d.is_dir():
        raise FileNotFoundError(f"dataset entry {d} is missing")
    b0, _ = io.read_pgm(d / "boundary0.pgm")
    b1, _ = io.read_pgm(d / "boundary1.pgm")
    uv, valid = io.read_flo(d / "flow.flo")
    return PairRecord(name, kind, io.read_ppm(d / "frame0.ppm"), io.read_ppm(d / "frame1.ppm"),
                      b0 > 0, b1 > 0, DenseFlow(uv, valid),
                      BfGroundTruth.from_text((d / "bf.txt").read_text()))


def read_dataset(root) -> List[PairRecord]:
    return [read_record(root, name, kind) for name, kind in read_manifest(root)]


def entry_name(i: int) -> str:
    return f"{i:05d}"
