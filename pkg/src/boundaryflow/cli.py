"""Command-line entry point: synth, train, detect, flow, eval-boundary, eval-flow."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .evaluation import (baseline_greedy_nn, baseline_ransac_translation,
                         boundary_pr, boundary_report, epe, flow_report, pr_table_csv,
                         summarize)
from .fcsn import (Fcsn, FcsnConfig, TrainingAborted, load_checkpoint, save_checkpoint, train)
from .matching import MatchParams, format_matches, parse_matches
from .oracle import generate_dataset
from .pipeline import (SegmentParams, as_record, entry_name, estimate_flow, read_dataset,
                       read_manifest, write_dataset)
from .segmentation import format_edgelets, nms_thin
from .visualize import flow_overlay, match_canvas

log = logging.getLogger("boundaryflow")


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _check_writable(path: Path, force: bool):
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    parent = path.parent if path.suffix else path
    try:
        parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {parent}: {exc}") from exc


PRESETS = {"desk": FcsnConfig, "shallow": FcsnConfig.shallow, "full": FcsnConfig.full_scale}


def _load_config(path, preset: str = "desk") -> FcsnConfig:
    if path is None:
        return PRESETS[preset]()
    try:
        return FcsnConfig.from_kv(Path(path).read_text())
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


def _match_params(args) -> MatchParams:
    return MatchParams(args.radius, args.topk, args.max_angle)


def _read_pair(args):
    a, b = Path(args.frame0), Path(args.frame1)
    for p in (a, b):
        if not p.exists():
            raise CliError(f"input image {p} not found")
    return io.read_ppm(a), io.read_ppm(b)


def _write_text(path: Path, text: str, force: bool):
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite")
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    out = Path(args.out)
    _check_writable(out / "manifest.txt", args.force)
    size = (args.size, args.size)
    samples = generate_dataset(args.n, args.seed, size)
    write_dataset([as_record(s, entry_name(i)) for i, s in enumerate(samples)], out, args.force)
    log.info("wrote %d entries to %s", len(samples), out)


def cmd_train(args):
    cfg = _load_config(args.config, args.preset)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.iterations is not None:
        cfg.iterations = args.iterations
    out = Path(args.out)
    _check_writable(out, args.force)
    data = read_dataset(args.dataset)
    if not data:
        raise CliError(f"dataset {args.dataset} is empty")
    net = load_checkpoint(args.resume) if args.resume else Fcsn(cfg)
    if args.resume:
        net.config.iterations = cfg.iterations
    log_path = out.with_name(out.name + ".log")
    lines = [f"# lambda_boundary={net.config.lambda_boundary} "
             f"lambda_background={net.config.lambda_background} lr={net.config.lr} "
             f"iterations={net.config.iterations} seed={net.config.seed} start_step={net.store.t}"]

    def record(n, loss):
        lines.append(f"{n.store.t} {float(loss)!r}")

    try:
        train(net, data, net.config.iterations, log_every=100, callback=record)
    except TrainingAborted as exc:
        partial = out.with_name(out.name + ".partial")
        save_checkpoint(net, partial)
        log_path.write_text("\n".join(lines) + "\n")
        raise CliError(f"{exc}; partial checkpoint kept at {partial}") from exc
    save_checkpoint(net, out)
    log_path.write_text("\n".join(lines) + "\n")
    log.info("checkpoint %s at step %d", out, net.store.t)


def cmd_detect(args):
    net = load_checkpoint(args.checkpoint)
    img_a, img_b = _read_pair(args)
    out = Path(args.out)
    _check_writable(out, True)
    try:
        pa, pb = net.predict(img_a, img_b)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    for tag, prob in (("0", pa), ("1", pb)):
        io.write_pgm(out / f"boundary{tag}.pgm", _to_u16(prob), 65535, force=args.force)
        if args.nms:
            io.write_pgm(out / f"thin{tag}.pgm", _to_u16(nms_thin(prob)), 65535, force=args.force)


def _to_u16(p):
    return np.rint(np.clip(p, 0, 1) * 65535).astype(np.int64)


def cmd_flow(args):
    net = load_checkpoint(args.checkpoint)
    img_a, img_b = _read_pair(args)
    out = Path(args.out)
    _check_writable(out, True)
    seg = SegmentParams(args.seed_spacing, args.threshold)
    try:
        est = estimate_flow(net, img_a, img_b, _match_params(args), seg)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _write_text(out / "flow.txt", est.field.to_text(), args.force)
    _write_text(out / "matches.txt", format_matches(est.field), args.force)
    _write_text(out / "edgelets.txt",
                format_edgelets(est.frames[0].edgelets + est.frames[1].edgelets), args.force)
    for k, fr in enumerate(est.frames):
        io.write_pgm(out / f"thin{k}.pgm", _to_u16(fr.thin), 65535, force=args.force)
        io.write_pgm(out / f"superpixels{k}.pgm", fr.superpixels, 65535, force=args.force)
    io.write_ppm(out / "overlay.ppm", flow_overlay(img_a, est.field), force=args.force)
    io.write_ppm(out / "matches.ppm", match_canvas(img_a, img_b, est.field), force=args.force)
    log.info("%d boundary-flow entries from %d edgelet matches", len(est.field),
             len(est.result.matches))


def _detect_one(job):
    ckpt, root, name = job
    net = load_checkpoint(ckpt)
    a = io.read_ppm(Path(root) / name / "frame0.ppm")
    b = io.read_ppm(Path(root) / name / "frame1.ppm")
    return name, net.predict(a, b)[0]


def _pred_maps(args, names):
    """Boundary maps for each entry: from --pred dir or by running --checkpoint."""
    if args.pred:
        maps = {}
        missing = []
        for name in names:
            p = Path(args.pred) / name / "boundary0.pgm"
            if not p.exists():
                missing.append(name)
                continue
            arr, maxval = io.read_pgm(p)
            maps[name] = arr / maxval
        if len(missing) == len(names):
            raise CliError(f"prediction directory {args.pred} has no entries")
        if missing:
            raise CliError(f"predictions missing for entries: {' '.join(missing)}")
        return maps
    if not args.checkpoint:
        raise CliError("need --pred or --checkpoint")
    jobs = [(args.checkpoint, args.gt, n) for n in names]
    return dict(_run_jobs(_detect_one, jobs, args.jobs))


def _run_jobs(fn, jobs, n_jobs):
    if n_jobs <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(n_jobs) as pool:
        return list(pool.map(fn, jobs))


def cmd_eval_boundary(args):
    rows = read_manifest(args.gt)
    if not rows:
        raise CliError(f"ground-truth manifest in {args.gt} is empty")
    names = [n for n, _ in rows]
    maps = _pred_maps(args, names)
    counts = []
    for name in names:
        gt, _ = io.read_pgm(Path(args.gt) / name / "boundary0.pgm")
        pred = maps[name] if args.thinned else nms_thin(maps[name])
        counts.append(boundary_pr(pred, gt > 0, args.thresholds))
    summary = summarize(counts)
    out = Path(args.out)
    _check_writable(out / "boundary_report.txt", args.force)
    _write_text(out / "boundary_report.txt", io.format_kv(boundary_report(summary, len(names))),
                args.force)
    _write_text(out / "boundary_pr.csv", pr_table_csv(counts, names, summary), args.force)
    print(f"ODS {summary.ods:.4f}  OIS {summary.ois:.4f}  AP {summary.ap:.4f}")


def _flow_one(job):
    ckpt, root, name, params, baselines = job
    from .pipeline import read_record
    net = load_checkpoint(ckpt)
    rec = read_record(root, name)
    est = estimate_flow(net, rec.frame_a, rec.frame_b, params)
    res = {"ours": (est.field, epe(est.field, rec.bf))}
    if baselines:
        ta = est.frames[0].thin >= 0.5
        tb = est.frames[1].thin >= 0.5
        g = baseline_greedy_nn(rec.frame_a, rec.frame_b, ta, tb, params.radius)
        r = baseline_ransac_translation(rec.frame_a, rec.frame_b, ta, tb, params.radius)
        res["greedy_nn"] = (g, epe(g, rec.bf))
        res["ransac"] = (r, epe(r, rec.bf))
    return name, res


def cmd_eval_flow(args):
    rows = read_manifest(args.gt)
    if not rows:
        raise CliError(f"ground-truth manifest in {args.gt} is empty")
    names = [n for n, _ in rows]
    per_method = {}
    if args.pred:
        from .pipeline import read_record
        missing = [n for n in names if not (Path(args.pred) / n / "matches.txt").exists()]
        if len(missing) == len(names):
            raise CliError(f"prediction directory {args.pred} has no entries")
        if missing:
            raise CliError(f"predictions missing for entries: {' '.join(missing)}")
        vals = []
        for n in names:
            field = parse_matches((Path(args.pred) / n / "matches.txt").read_text())
            vals.append(epe(field, read_record(args.gt, n).bf))
        per_method["ours"] = vals
    else:
        if not args.checkpoint:
            raise CliError("need --pred or --checkpoint")
        jobs = [(args.checkpoint, args.gt, n, _match_params(args), args.baselines) for n in names]
        for _, res in _run_jobs(_flow_one, jobs, args.jobs):
            for method, (_, v) in res.items():
                per_method.setdefault(method, []).append(v)
    out = Path(args.out)
    _check_writable(out / "flow_report.txt", args.force)
    _write_text(out / "flow_report.txt", io.format_kv(flow_report(per_method)), args.force)
    lines = ["entry," + ",".join(per_method)]
    for k, n in enumerate(names):
        lines.append(n + "," + ",".join(f"{per_method[m][k]:.6f}" for m in per_method))
    _write_text(out / "flow_epe.csv", "\n".join(lines) + "\n", args.force)
    for m, v in per_method.items():
        print(f"EPE {m}: {np.mean(v):.4f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boundaryflow", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if seed:
            p.add_argument("--seed", type=int, default=None)

    def matching(p):
        p.add_argument("--radius", type=float, default=100.0)
        p.add_argument("--topk", type=int, default=10)
        p.add_argument("--max-angle", type=float, default=45.0)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("out")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    common(p, seed=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train the network on a dataset")
    p.add_argument("dataset")
    p.add_argument("out", help="checkpoint path")
    p.add_argument("--config", help="key = value file; overrides --preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--iterations", type=int)
    p.add_argument("--resume", help="continue from this checkpoint")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="boundary maps for an image pair")
    p.add_argument("checkpoint")
    p.add_argument("frame0")
    p.add_argument("frame1")
    p.add_argument("out")
    p.add_argument("--nms", action="store_true", help="also write thinned maps")
    common(p, seed=False)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("flow", help="boundary flow for an image pair")
    p.add_argument("checkpoint")
    p.add_argument("frame0")
    p.add_argument("frame1")
    p.add_argument("out")
    p.add_argument("--seed-spacing", type=int, default=16)
    p.add_argument("--threshold", type=float, default=0.5)
    matching(p)
    common(p, seed=False)
    p.set_defaults(fn=cmd_flow)

    p = sub.add_parser("eval-boundary", help="ODS / OIS / AP over a dataset")
    p.add_argument("gt", help="dataset directory with ground truth")
    p.add_argument("out", help="report directory")
    p.add_argument("--pred", help="directory holding <entry>/boundary0.pgm")
    p.add_argument("--checkpoint", help="run this network instead of reading --pred")
    p.add_argument("--thinned", action="store_true", help="predictions are already thinned")
    p.add_argument("--thresholds", type=int, default=33)
    p.add_argument("--jobs", type=int, default=1)
    common(p, seed=False)
    p.set_defaults(fn=cmd_eval_boundary)

    p = sub.add_parser("eval-flow", help="boundary-flow EPE over a dataset")
    p.add_argument("gt")
    p.add_argument("out")
    p.add_argument("--pred", help="directory holding <entry>/matches.txt")
    p.add_argument("--checkpoint")
    p.add_argument("--baselines", action="store_true", help="also score greedy NN and RANSAC")
    p.add_argument("--jobs", type=int, default=1)
    matching(p)
    common(p, seed=False)
    p.set_defaults(fn=cmd_eval_flow)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
