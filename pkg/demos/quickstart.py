"""Train a small desk model, then estimate boundary flow on a held-out pair.

Writes images to ``demos/out/`` (override with the first argument) and
prints boundary and flow scores. Takes about two minutes on one core.
"""
import sys
from pathlib import Path

import numpy as np

from boundaryflow import io
from boundaryflow.evaluation import (
    baseline_greedy_nn, baseline_ransac_translation, boundary_pr, epe, summarize,
)
from boundaryflow.excitation import Excitation, ExcitationSeed, relevance_to_pgm
from boundaryflow.fcsn import Fcsn, FcsnConfig, train
from boundaryflow.oracle import generate_dataset
from boundaryflow.pipeline import estimate_flow
from boundaryflow.segmentation import nms_thin
from boundaryflow.visualize import flow_overlay, match_canvas


def main(out: Path, iterations: int = 600):
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(200, seed=1)
    net = Fcsn(FcsnConfig.shallow())
    log = train(net, data, iterations)
    sm = log.smoothed()
    print(f"trained {iterations} steps, smoothed loss {sm[0]:.4f} -> {sm[-1]:.4f}")

    held = generate_dataset(20, seed=2)
    thin = [nms_thin(net.predict(s.frame_a, s.frame_b)[0]) for s in held]
    s = summarize([boundary_pr(t, h.boundary_a) for t, h in zip(thin, held)])
    print(f"held-out boundaries: ODS {s.ods:.3f} OIS {s.ois:.3f} AP {s.ap:.3f}")

    pair = held[0]
    est = estimate_flow(net, pair.frame_a, pair.frame_b)
    ta, tb = (f.thin >= 0.5 for f in est.frames)
    nn = baseline_greedy_nn(pair.frame_a, pair.frame_b, ta, tb)
    rs = baseline_ransac_translation(pair.frame_a, pair.frame_b, ta, tb)
    print(f"EPE on pair 0: ours {epe(est.field, pair.bf):.2f}, greedy NN "
          f"{epe(nn, pair.bf):.2f}, RANSAC {epe(rs, pair.bf):.2f}")

    io.write_ppm(out / "overlay.ppm", flow_overlay(pair.frame_a, est.field))
    io.write_ppm(out / "matches.ppm", match_canvas(pair.frame_a, pair.frame_b, est.field))
    io.write_pgm(out / "thin0.pgm", np.rint(est.frames[0].thin * 255).astype(int))
    if est.frames[0].edgelets:
        e = max(est.frames[0].edgelets, key=lambda e: len(e.pixels))
        att = Excitation(net, net.forward_pair(pair.frame_a, pair.frame_b)).attention(
            ExcitationSeed(0, e.pixels))
        io.write_pgm(out / "attention.pgm", relevance_to_pgm(att), 65535)
    print(f"images written to {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).parent / "out")
