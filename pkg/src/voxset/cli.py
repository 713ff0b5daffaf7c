"""``voxset`` command line.

Exit codes: 0 success, 1 check failure, 2 usage error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from contextlib import nullcontext
from dataclasses import replace

import numpy as np

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_FAIL", "EXIT_USAGE", "EXIT_IO"]

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("voxset")

STOCHASTIC = {"gen", "train-toy", "bench"}


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return [int(float(v)) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a list of integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (required for gen, bench, train-toy)")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP threads (default 1)")
    common.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="float width; default f64, except train-toy which uses f32")
    common.add_argument("--config", default=None, help="key = value file supplying defaults for this command")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="voxset", description="Voxel set attention toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("selftest", parents=[common], help="gradient, scatter and attention oracle suites")
    p.add_argument("--filter", action="append", default=None, metavar="SUITE",
                   help="run only this suite (repeatable): gradcheck, scatter, vsa, softmax")
    p.add_argument("--sabotage-vjp", action="store_true", help="negate every leaf gradient to prove the harness bites")

    p = sub.add_parser("bench", parents=[common], help="time encoder+decoder forward against n")
    p.add_argument("--n-list", type=_int_list, default=[50_000, 100_000, 200_000])
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="write the table here instead of stdout")

    p = sub.add_parser("gen", parents=[common], help="write synthetic scenes (.bin points + .txt labels)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--outdir", required=False, default=None)
    p.add_argument("--scene-config", default=None, help="scene spec file (box_count, points_per_box, ...)")

    p = sub.add_parser("train-toy", parents=[common], help="train and evaluate on synthetic scenes")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--train-scenes", type=int, default=None)
    p.add_argument("--eval-scenes", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None)
    p.add_argument("--metrics", default="metrics.tsv")
    p.add_argument("--checkpoint", default="model.npz")

    p = sub.add_parser("infer", parents=[common], help="detect boxes in one point file")
    p.add_argument("--checkpoint", required=False, default=None)
    p.add_argument("--input", required=False, default=None, help=".bin (KITTI) or text point file")
    p.add_argument("--out", default="-", help="box rows 'x y z l w h yaw score' ('-' for stdout)")
    p.add_argument("--cheat-labels", default=None,
                   help="label file; replaces the learned head with one that encodes these boxes")
    return parser


def _read_config(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = val
    return out


def _parse(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = _read_config(args.config)
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {args.config}: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        unknown = sorted(set(cfg) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s) for {args.command}: {', '.join(unknown)}")
        defaults = {}
        for key, val in cfg.items():
            action = known[key]
            if action.nargs == 0:
                defaults[key] = val.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(val) if action.type else val
                if action.choices and defaults[key] not in action.choices:
                    raise UsageError(f"config {key} = {val!r}: choose from {list(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.command in STOCHASTIC and args.seed is None:
        raise UsageError(f"{args.command} needs --seed (or 'seed = ...' in --config)")
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def _thread_limit(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:      # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


def _open_out(path):
    return nullcontext(sys.stdout) if path in (None, "-") else open(path, "w")


def cmd_selftest(args) -> int:
    from .selftest import SUITES, run_suites

    names = args.filter or list(SUITES)
    bad = [n for n in names if n not in SUITES]
    if bad:
        raise UsageError(f"unknown suite(s) {bad}; choose from {sorted(SUITES)}")
    cases = run_suites(names, seed=args.seed or 0, sabotage=args.sabotage_vjp)
    for name in names:
        mine = [c for c in cases if c.suite == name]
        passed = sum(c.ok for c in mine)
        print(f"{name}\tpass={passed}\tfail={len(mine) - passed}")
    failed = [c for c in cases if not c.ok]
    if failed:
        c = failed[0]
        print(f"FIRST FAILURE {c.suite}/{c.name}: value={c.value:.3e} limit={c.limit:.0e} inputs: {c.inputs}")
        return EXIT_FAIL
    print("all suites passed")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import scaling_table

    if args.repeats < 1:
        raise UsageError("--repeats must be >= 1")
    if list(args.n_list) != sorted(args.n_list) or not args.n_list:
        raise UsageError("--n-list must be non-empty and ascending")
    if args.repeats == 1:
        print("warning: repeats=1 gives a single noisy timing per n", file=sys.stderr)
    dtype = np.float32 if args.precision == "f32" else np.float64
    rows = scaling_table(args.n_list, args.k, args.d, args.repeats, args.seed, dtype)
    with _open_out(args.out) as fh:
        fh.write("n\tmedian_ms\tratio_to_prev\n")
        for n, ms, ratio in rows:
            fh.write(f"{n}\t{ms:.3f}\t{'nan' if math.isnan(ratio) else f'{ratio:.3f}'}\n")
    return EXIT_OK


def cmd_gen(args) -> int:
    from .pcio import SceneSpec, gen_synthetic_scene, load_scene_spec, write_kitti_bin, write_labels

    if args.outdir is None:
        raise UsageError("gen needs --outdir")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    spec = SceneSpec()
    if args.scene_config:
        try:
            spec, _ = load_scene_spec(open(args.scene_config).read())
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    os.makedirs(args.outdir, exist_ok=True)
    for i in range(args.count):
        pc, boxes = gen_synthetic_scene(np.random.SeedSequence([args.seed, i]), spec)
        stem = os.path.join(args.outdir, f"scene_{i:04d}")
        write_kitti_bin(stem + ".bin", pc)
        write_labels(stem + ".txt", boxes)
    print(f"wrote {args.count} scenes to {args.outdir}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .checkpoint import save_checkpoint
    from .training import METRIC_COLUMNS, TrainConfig, train_toy

    cfg = TrainConfig()
    upd = {"precision": args.precision or cfg.precision}
    for key in ("steps", "lr", "train_scenes", "eval_scenes", "eval_every"):
        if getattr(args, key) is not None:
            upd[key] = getattr(args, key)
    try:
        cfg = replace(cfg, **upd)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def progress(rec):
        if "recall" in rec:
            log.info("step %d loss %.4f recall %.3f ap %.3f", rec["step"], rec["loss"], rec["recall"], rec["ap"])

    model, history, metrics = train_toy(cfg, seed=args.seed, callback=progress)
    # written after the run so the last row carries the held-out recall and AP
    with open(args.metrics, "w") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for rec in history:
            fh.write("\t".join(_fmt(rec.get(c)) for c in METRIC_COLUMNS) + "\n")
    save_checkpoint(args.checkpoint, model)
    print(f"recall={metrics['recall']:.4f} ap={metrics['ap']:.4f} seconds={metrics['seconds']:.1f} "
          f"metrics={args.metrics} checkpoint={args.checkpoint}")
    return EXIT_OK


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def cmd_infer(args) -> int:
    from .checkpoint import load_checkpoint
    from .detect import oracle_head_outputs, predict_boxes
    from .pcio import boxes_to_array, crop_range, read_labels, read_points

    if args.checkpoint is None or args.input is None:
        raise UsageError("infer needs --checkpoint and --input")
    model = load_checkpoint(args.checkpoint)
    pc = read_points(args.input)
    if args.cheat_labels:
        gts = boxes_to_array(read_labels(args.cheat_labels))
        boxes, scores = predict_boxes(oracle_head_outputs(model.anchors, gts), model.anchors, model.detect_cfg)
    else:
        if args.precision == "f64" and model.dtype != np.float64:
            log.info("checkpoint is %s; running in that precision", model.dtype)
        boxes, scores = model.predict(crop_range(pc, model.backbone_cfg.grid_spec(0)))
    with _open_out(args.out) as fh:
        fh.write("# x y z l w h yaw score\n")
        for b, s in zip(boxes, scores):
            fh.write(" ".join(repr(float(v)) for v in b) + f" {float(s)!r}\n")
    return EXIT_OK


COMMANDS = {
    "selftest": cmd_selftest,
    "bench": cmd_bench,
    "gen": cmd_gen,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
}


def main(argv=None) -> int:
    from .checkpoint import SchemaError
    from .pcio import EmptyCloudError, FormatError

    try:
        args = _parse(argv)
    except SystemExit as exc:          # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"voxset: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"voxset: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"voxset: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, SchemaError, EmptyCloudError) as exc:
        print(f"voxset: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":      # pragma: no cover
    sys.exit(main())
