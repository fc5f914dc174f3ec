"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import analysis, gradcheck
from .config import ModelConfig, parse_config, parse_size
from .errors import ConfigError, DataError, DivergenceError, FpeError
from .experiments import TOY_CONFIG, TOY_LR, toy_datasets
from .graph import build, forward, predict
from .imageio import encode_pgm, encode_ppm, read_palette, read_ppm
from .train import PolySchedule, train
from .weights import load_weights, save_weights


class UsageError(Exception):
    pass


def _load_config(path, default=None):
    if path is None:
        return default if default is not None else ModelConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def _with_input(cfg, size):
    if size is None:
        return cfg
    h, w = parse_size(size)
    return cfg.with_input(h, w)


def cmd_analyze(args, out):
    cfg = _with_input(_load_config(args.config), args.input)
    rep = analysis.cost_report(cfg)
    out.write(analysis.format_report(rep, machine=args.machine))
    return 0


def cmd_shapes(args, out):
    cfg = _with_input(_load_config(args.config), args.input)
    out.write(analysis.format_shape_table(analysis.shape_table(cfg)))
    return 0


def _write_atomic(path, data):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def cmd_infer(args, out):
    cfg = _load_config(args.config, TOY_CONFIG)
    image = read_ppm(args.image)
    _, h, w = image.shape
    pad_h, pad_w = (-h) % 8, (-w) % 8
    comments = []
    if pad_h or pad_w:
        if args.strict:
            raise DataError(f"image {h}x{w} is not divisible by 8 (auto-padding disabled by --strict)")
        image = np.pad(image, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
        comments.append(f"reflect-padded {h}x{w} to {h + pad_h}x{w + pad_w} and cropped back")
    g = build(cfg.with_input(h + pad_h, w + pad_w))
    load_weights(g, args.weights)
    labels = predict(g, image[None])[0, :h, :w]
    if args.palette:
        pal = read_palette(args.palette)
        missing = sorted(set(np.unique(labels).tolist()) - set(pal))
        if missing:
            raise DataError(f"palette has no color for classes {missing}")
        lut = np.zeros((max(pal) + 1, 3), dtype=np.uint8)
        for c, rgb in pal.items():
            lut[c] = rgb
        data = encode_ppm(lut[labels], comments)
    else:
        maxval = 255 if cfg.num_classes <= 256 else 65535
        data = encode_pgm(labels, maxval, comments)
    _write_atomic(args.out, data)
    out.write(f"wrote {args.out} ({h}x{w}, {cfg.num_classes} classes)\n")
    return 0


def cmd_train(args, out):
    cfg = _load_config(args.config, TOY_CONFIG)
    train_set, val_set = toy_datasets(args.data_seed, args.images, cfg, n_val=args.val_images)
    g = build(cfg, seed=args.seed)
    log_lines = ["# epoch\tlr\tloss\tmiou"]
    out.write(log_lines[0] + "\n")

    def on_epoch(rec):
        log_lines.append(rec.line())
        out.write(rec.line() + "\n")
        out.flush()

    try:
        if args.epochs > 0:
            train(
                g,
                train_set,
                args.epochs,
                PolySchedule(args.lr, 0.9, args.epochs),
                None,
                seed=args.seed,
                val_set=val_set,
                on_epoch=on_epoch,
            )
    except DivergenceError:
        if os.path.exists(args.out):
            os.remove(args.out)
        raise
    save_weights(g, args.out)
    if args.log:
        with open(args.log, "w") as fh:
            fh.write("\n".join(log_lines) + "\n")
    return 0


def cmd_bench(args, out):
    cfg = _with_input(_load_config(args.config), args.input)
    if args.iters < 1 or args.warmup < 0:
        raise UsageError("--iters must be >= 1 and --warmup >= 0")
    g = build(cfg, seed=args.seed)
    x = np.random.default_rng(args.seed).normal(size=(1, 3, cfg.height, cfg.width)).astype(np.float32)
    for _ in range(args.warmup):
        forward(g, x, "infer")
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        forward(g, x, "infer")
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    mean = float(t.mean())
    out.write(f"input\t{cfg.height}x{cfg.width}\n")
    out.write(f"iters\t{args.iters}\nwarmup\t{args.warmup}\n")
    out.write(f"mean_ms\t{mean * 1e3:.3f}\nmedian_ms\t{float(np.median(t)) * 1e3:.3f}\nmin_ms\t{float(t.min()) * 1e3:.3f}\n")
    out.write(f"fps\t{1.0 / mean:.3f}\n")
    return 0


def cmd_gradcheck(args, out):
    if args.op:
        try:
            names = gradcheck.resolve(args.op)
        except KeyError:
            raise UsageError(f"unknown op {args.op!r}; choose from {', '.join(gradcheck.CASES)}") from None
    else:
        names = None
    results = gradcheck.run(names, seed=args.seed)
    out.write(f"{'op':<26} {'max_rel_error':>14}  status\n")
    for r in results:
        out.write(f"{r.op:<26} {r.max_rel_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}\n")
    failed = [r for r in results if not r.passed]
    for r in failed:
        sys.stderr.write(f"FAIL {r.op}: shapes {r.shapes}, worst input {r.worst[0]} element {r.worst[1]}, "
                         f"error {r.max_rel_error:.3e}\n")
    return 1 if failed else 0


def make_parser():
    ap = argparse.ArgumentParser(prog="fpenet", description="FPENet engine: analysis, training, inference.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="parameter / MAC / receptive-field report")
    p.add_argument("--config")
    p.add_argument("--input", help="HxW")
    p.add_argument("--machine", action="store_true", help="tab-separated output")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("shapes", help="per-stage output shape table")
    p.add_argument("--config")
    p.add_argument("--input", help="HxW")
    p.set_defaults(func=cmd_shapes)

    p = sub.add_parser("infer", help="segment a PPM image")
    p.add_argument("--config")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--palette")
    p.add_argument("--strict", action="store_true", help="reject sizes not divisible by 8")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train", help="train on the synthetic toy dataset")
    p.add_argument("--config")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0, help="weight-init / shuffle seed")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--images", type=int, default=200)
    p.add_argument("--val-images", type=int, default=50)
    p.add_argument("--lr", type=float, default=TOY_LR)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="time infer-mode forward passes")
    p.add_argument("--config")
    p.add_argument("--input", help="HxW")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--op")
    g.add_argument("--all", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args, out)
    except (UsageError, ConfigError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (FpeError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
