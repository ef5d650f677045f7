"""Command-line entry point: ``rangeseg {project,infer,eval,gradcheck,info}``.

Exit codes: 0 ok, 1 check failure, 2 input error, 3 config/weights mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checks, metrics
from .errors import ConfigError, FormatError, ParamMismatchError, RangeSegError
from .model import ModelConfig, check_store, count_parameters, forward, init_params, load_weights
from .projection import project
from .scan_io import encode_labels, read_labels, read_scan, remap_labels

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_MISMATCH = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        self.code = code
        super().__init__(msg)


def _threads(args) -> int:
    if args.threads:
        return max(1, args.threads)
    env = os.environ.get("RANGESEG_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise CliError(EXIT_INPUT, f"RANGESEG_THREADS must be an integer, got {env!r}") from None


def _model_config(args) -> ModelConfig:
    overrides = {"dataset": args.dataset, "seed": getattr(args, "seed", None)}
    try:
        if args.config:
            path = Path(args.config)
            if not path.is_file():
                raise CliError(EXIT_INPUT, f"config file not found: {path}")
            return ModelConfig.load(path, **overrides)
        return ModelConfig(**{k: v for k, v in overrides.items() if v is not None})
    except (ConfigError, KeyError) as exc:
        raise CliError(EXIT_MISMATCH, f"invalid model config: {exc}") from None


def _require_files(paths):
    for p in paths:
        if not Path(p).is_file():
            raise CliError(EXIT_INPUT, f"no such file: {p}")


def _read_scan(path):
    try:
        return read_scan(path)
    except (OSError, RangeSegError, ValueError) as exc:
        raise CliError(EXIT_INPUT, f"cannot read scan {path}: {exc}") from None


def _normalized_png(img: np.ndarray, path: Path):
    from PIL import Image

    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(initial=0.0), img.max(initial=0.0)
    if hi > lo:
        out = np.round((img - lo) / (hi - lo) * 255.0)
    else:
        out = np.zeros_like(img)
    Image.fromarray(out.astype(np.uint8), mode="L").save(path)


# -- subcommands -----------------------------------------------------------------

def cmd_project(args) -> int:
    _require_files([args.scan])
    cfg = _model_config(args)
    scan = _read_scan(args.scan)
    ds = cfg.dataset_config
    index = project(scan, cfg.beams(), ds)
    h, w = ds.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    occ = index.occupancy()
    depth = np.zeros(h * w)
    if index.num_points:
        sums = np.add.reduceat(index.r[index.order], index.starts)
        depth[index.cell_ids] = sums / index.counts
    _normalized_png(depth.reshape(h, w), out / "depth.png")
    _normalized_png(occ, out / "density.png")

    rows = (occ > 0).sum(axis=1)
    lines = [
        f"points {index.num_points}",
        f"groups {index.num_groups}",
        f"cells {h * w}",
        f"empty_cell_ratio {1 - index.num_groups / (h * w):.6f}",
        f"max_points_per_cell {int(occ.max(initial=0))}",
        f"degenerate_points {index.degenerate}",
        f"out_of_fov_points {index.out_of_fov}",
        "row_occupancy " + " ".join(str(int(r)) for r in rows),
    ]
    (out / "stats.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"projected {index.num_points} points into {index.num_groups} of {h * w} cells -> {out}")
    return EXIT_OK


def _load_store(args, cfg):
    if args.weights:
        _require_files([args.weights])
        try:
            store = load_weights(args.weights)
        except FormatError as exc:
            raise CliError(EXIT_INPUT, f"cannot read weights {args.weights}: {exc}") from None
    else:
        print(f"no --weights given; using random initialisation (seed {cfg.seed})", file=sys.stderr)
        store = init_params(cfg)
    try:
        check_store(cfg, store)
    except ParamMismatchError as exc:
        raise CliError(EXIT_MISMATCH, f"weights do not match config: first offending tensor {exc}") from None
    return store


def cmd_infer(args) -> int:
    _require_files(args.scans)
    cfg = _model_config(args)
    store = _load_store(args, cfg)
    table = cfg.beams()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.num_classes

    def run(path):
        scan = _read_scan(path)
        res = forward(scan, cfg, store, table)
        dest = out / (Path(path).stem + ".pred")
        dest.write_bytes(encode_labels(res.labels.astype(np.uint32)))
        return path, len(scan), res.diagnostics.wall_time, dest

    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        for path, n, secs, dest in pool.map(run, args.scans):
            print(f"{path}: {n} points, {secs * 1000:.1f} ms -> {dest} ({k} classes)")
    return EXIT_OK


def _index_dir(path: Path, suffixes) -> dict[str, Path]:
    found = {}
    for p in sorted(path.iterdir()):
        if p.is_file() and p.suffix in suffixes:
            found.setdefault(p.stem, p)
    return found


def _parse_bins(text: str | None):
    if not text:
        return metrics.DEFAULT_BIN_EDGES
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CliError(EXIT_INPUT, f"--bins must be comma-separated numbers, got {text!r}") from None


def _fmt(v) -> str:
    return "nan" if v is None or np.isnan(v) else f"{v:.6f}"


def cmd_eval(args) -> int:
    cfg = _model_config(args)
    ds = cfg.dataset_config
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise CliError(EXIT_INPUT, f"not a directory: {d}")
    preds = _index_dir(pred_dir, {".pred", ".label"})
    gts = _index_dir(gt_dir, {".label"})
    for stem in sorted(set(preds) | set(gts)):
        if stem not in preds:
            raise CliError(EXIT_INPUT, f"missing prediction for {stem}")
        if stem not in gts:
            raise CliError(EXIT_INPUT, f"missing ground truth for {stem}")
    scan_dir = Path(args.scans) if args.scans else gt_dir
    scans = {s: scan_dir / f"{s}.bin" for s in gts}
    with_ranges = bool(gts) and all(p.is_file() for p in scans.values())
    edges = _parse_bins(args.bins)
    if len(edges) < 2 or not np.all(np.diff(edges) > 0):
        raise CliError(EXIT_MISMATCH, f"bin edges must be strictly increasing, got {list(edges)}")

    def frame(stem):
        try:
            gt = remap_labels(read_labels(gts[stem]), ds)
            raw_pred = read_labels(preds[stem]).astype(np.int64)
        except (OSError, RangeSegError) as exc:
            raise CliError(EXIT_INPUT, f"{stem}: {exc}") from None
        pred = remap_labels(raw_pred, ds) if preds[stem].suffix == ".label" else raw_pred
        if pred.size != gt.size:
            raise CliError(EXIT_INPUT, f"{stem}: {pred.size} predictions for {gt.size} labels")
        try:
            cm = metrics.accumulate(metrics.ConfusionMatrix.empty(ds.num_classes), pred, gt, ds.ignore_id)
        except RangeSegError as exc:
            raise CliError(EXIT_INPUT, f"{stem}: {exc}") from None
        bins = None
        if with_ranges:
            scan = _read_scan(scans[stem])
            if len(scan) != gt.size:
                raise CliError(EXIT_INPUT, f"{stem}: scan has {len(scan)} points, labels {gt.size}")
            index = project(scan, cfg.beams(), ds)
            bins = metrics.range_binned_miou(pred, gt, index.r, ds.num_classes, ds.ignore_id, edges)
        return cm, bins

    stems = sorted(gts)
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        results = list(pool.map(frame, stems))
    total = metrics.ConfusionMatrix.empty(ds.num_classes)
    bin_cms = None
    for cm, bins in results:
        total = total + cm
        if bins is not None:
            if bin_cms is None:
                bin_cms = [metrics.ConfusionMatrix.empty(ds.num_classes) for _ in bins]
            bin_cms = [a + b.matrix for a, b in zip(bin_cms, bins)]

    ious = metrics.iou(total, args.zero_absent)
    accs = metrics.acc(total, args.zero_absent)
    names = ds.class_names or tuple(str(i) for i in range(ds.num_classes))
    summary = []
    print(f"{'class':<22}{'IoU':>10}{'Acc':>10}")
    for name, i, a in zip(names, ious.per_class, accs.per_class):
        print(f"{name:<22}{_fmt(i):>10}{_fmt(a):>10}")
        summary.append(f"{name} {_fmt(i)} {_fmt(a)}")
    print(f"{'mIoU':<22}{_fmt(ious.mean):>10}")
    print(f"{'mAcc':<22}{_fmt(accs.mean):>10}")
    summary += [f"miou {_fmt(ious.mean)}", f"macc {_fmt(accs.mean)}"]
    if bin_cms is not None:
        print("range bins (m):")
        for lo, hi, cm in zip(edges[:-1], edges[1:], bin_cms):
            s = metrics.iou(cm, args.zero_absent).mean if cm.counts.sum() else None
            label = "not-present" if s is None or np.isnan(s) else f"{s:.6f}"
            print(f"  [{lo:g}, {hi:g})  {label}")
            summary.append(f"bin {lo:g} {hi:g} {label}")
    else:
        print("range bins skipped: no scans found for range lookup")
    print(f"{len(stems)} frames, {total.total} points ({total.ignored} ignored), "
          f"{time.perf_counter() - t0:.2f} s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.txt").write_text("\n".join(summary) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run_suite(seed=args.seed or 0, corrupt=args.corrupt)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<18} max_rel_err={r.error:.3e}  {status}  (worst: {r.worst_tensor})")
    if failed:
        print(f"gradient check failed: {failed[0].name}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} blocks below {checks.THRESHOLD:g}")
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _model_config(args)
    ds = cfg.dataset_config
    bb = cfg.backbone
    print(f"dataset       {ds.name}: {ds.num_beams}x{ds.width}, fov "
          f"[{np.degrees(ds.fov_down):.1f}, {np.degrees(ds.fov_up):.1f}] deg, {ds.num_classes} classes")
    print(cfg.to_text().rstrip())
    print(f"parameters    {count_parameters(cfg):,}")
    for i, (hw, wd) in enumerate(zip(bb.stage_resolutions(*ds.resolution), bb.widths)):
        print(f"stage{i}        {hw[0]}x{hw[1]}x{wd}  ({bb.depths[i]} blocks)")
    if args.weights:
        store = _load_store(args, cfg)
        print(f"weights       {args.weights}: {len(store)} tensors match the config")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dataset", help="semantickitti or nuscenes (default: semantickitti)")
    common.add_argument("--config", help="key=value model config file")
    common.add_argument("--out", default="rangeseg-out", help="output directory")
    common.add_argument("--seed", type=int, help="initialisation / check seed")
    common.add_argument("--threads", type=int, help="worker threads (fallback: $RANGESEG_THREADS)")

    parser = argparse.ArgumentParser(prog="rangeseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", parents=[common], help="write range/density images and stats")
    p.add_argument("scan")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("infer", parents=[common], help="predict per-point classes to .pred files")
    p.add_argument("scans", nargs="+")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against labels")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--scans", help="directory of .bin scans for range bins (default: gt_dir)")
    p.add_argument("--bins", help="comma-separated range bin edges in meters")
    p.add_argument("--zero-absent", action="store_true", help="score absent classes as 0 in means")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("info", parents=[common], help="print config, shapes and parameter count")
    p.add_argument("--weights")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ParamMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (RangeSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
