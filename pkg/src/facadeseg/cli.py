"""Command-line surface.

Exit codes: 0 success, 2 usage error, 3 data error, 4 model/numeric error.
Diagnostics go to stderr; results go to stdout.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import facade_data, pipeline, report
from .errors import DataError, FacadesegError, MissingFile


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="facadeseg",
        description="Language-guided wall/window segmentation of synthetic "
                    "building facades.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic facade corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--styles", default=",".join(facade_data.STYLES),
                   help="comma-separated style tags")

    p = sub.add_parser("train", help="train a model on a generated corpus")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--report-dir", help="write loss log and figures here")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test",
                   choices=("train", "test", "val"))
    p.add_argument("--free-decode", action="store_true",
                   help="locate <SEG> by greedy decoding instead of the "
                        "teacher-forced answer")
    p.add_argument("--force-seg", action="store_true")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--dump-masks", help="write per-sample predicted masks")
    p.add_argument("--report-dir", help="write metrics.csv and figures here")

    p = sub.add_parser("segment", help="segment one image from a description")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True, help="output mask (PGM)")
    p.add_argument("--force-seg", action="store_true",
                   help="append <SEG> if the decoded answer lacks one")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--overlay", help="also write an overlay figure (PNG)")

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the joint loss")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    return parser


def _cmd_gen_data(args):
    styles = tuple(s for s in args.styles.split(",") if s)
    manifest = facade_data.build_dataset(args.out, args.count, args.seed,
                                         size=args.size, styles=styles)
    counts = manifest.split_counts()
    print(f"wrote {len(manifest.samples)} samples to {args.out} "
          f"(train={counts['train']} test={counts['test']} "
          f"val={counts['val']})")
    return 0


def _cmd_train(args):
    config = pipeline.parse_config(args.config) if args.config \
        else pipeline.TrainConfig().validate()
    manifest = facade_data.read_manifest(
        os.path.join(args.data, "manifest.jsonl"))
    bundle, log = train_with_progress(config, manifest, args.data)
    pipeline.save_checkpoint(bundle, args.out, train_seed=config.seed)
    if args.report_dir:
        report.write_train_report(log, args.report_dir)
    print(f"trained {config.max_steps} steps; checkpoint -> {args.out}")
    if log:
        print(f"final: {log[-1]}")
    return 0


def train_with_progress(config, manifest, root):
    return pipeline.train(config, manifest, root,
                          progress=lambda line: print(line, file=sys.stderr))


def _cmd_eval(args):
    bundle, _ = pipeline.load_checkpoint(args.ckpt)
    manifest = facade_data.read_manifest(
        os.path.join(args.data, "manifest.jsonl"))
    result = pipeline.evaluate(bundle, manifest, args.data, split=args.split,
                               tau=args.tau,
                               teacher_forced=not args.free_decode,
                               force_seg=args.force_seg,
                               dump_dir=args.dump_masks)
    print("group,samples,iou_window,iou_wall,miou,pixel_accuracy")
    rows = list(result.by_style.items()) + [("overall", result.overall)]
    for name, rep in rows:
        print("%s,%d,%.6f,%.6f,%.6f,%.6f" % (
            name, rep.count, rep.iou_window, rep.iou_wall, rep.miou,
            rep.pixel_accuracy))
    if args.report_dir:
        report.write_eval_report(result, args.report_dir)
    return 0


def _cmd_segment(args):
    bundle, _ = pipeline.load_checkpoint(args.ckpt)
    image = facade_data.read_image(args.image)
    answer, mask, _ = pipeline.segment_image(bundle, image, args.text,
                                             tau=args.tau,
                                             force_seg=args.force_seg)
    facade_data.write_mask(mask, args.out)
    if args.overlay:
        report.save_mask_overlay(image, mask, args.overlay)
    print(answer)
    return 0


def _cmd_gradcheck(args):
    result = pipeline.gradient_check(seed=args.seed, tol=args.tol, h=args.h)
    print("parameter,max_rel_err")
    for name in sorted(result.max_rel_err):
        print("%s,%.3e" % (name, result.max_rel_err[name]))
    if not result.passed:
        worst, err = result.worst()
        print(f"gradcheck FAILED: {worst} rel err {err:.3e} >= "
              f"{result.tol:g}", file=sys.stderr)
        return 4
    print(f"gradcheck passed at tol {result.tol:g}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "segment": _cmd_segment,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _COMMANDS[args.command](args)
    except (DataError, MissingFile) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except FacadesegError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
