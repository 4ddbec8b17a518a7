"""Command-line entry point: ``triframe <subcommand> ...``.

Exit codes: 0 success, 1 invalid input or arguments, 2 I/O failure,
3 numerical failure.
"""

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import backend, metrics
from .errors import NumericalError, TriframeError, ValidationError
from .frame_io import RGB, convert_clip, read_clip, write_clip, write_png_sequence
from .model import init_generator, load_checkpoint, save_checkpoint
from .pipeline import (
    DegradeSpec,
    TrainingConfig,
    build_dataset,
    degrade_clip,
    enhance_clip,
    evaluate,
    load_dataset,
    load_training_config,
    save_dataset,
    train,
)

logger = logging.getLogger("triframe")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with the I/O code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(f"{self.prog}: {message}")


def _geometry_args(p):
    g = p.add_argument_group("raw YUV input (ignored for .y4m)")
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--subsampling", type=int, choices=(420, 444), default=420)
    g.add_argument("--bit-depth", type=int, choices=(8, 10), default=8)


def _output_args(p):
    p.add_argument("--out-subsampling", type=int, choices=(420, 444), default=444,
                   help="chroma layout of the written clip (default 444)")


def _read(path, args):
    return read_clip(path, args.width, args.height, args.subsampling, args.bit_depth)


def _write(clip, path, args):
    write_clip(clip, path, args.out_subsampling, 8 if str(path).lower().endswith(".y4m")
               else args.bit_depth)


def cmd_degrade(args):
    clip = _read(args.input, args)
    out = degrade_clip(clip, DegradeSpec(args.strength))
    _write(out, args.out, args)
    logger.info("degraded %d frames: %.3f dB", len(clip), metrics.psnr(out.array(), clip.array()))


def _pristine_clips(directory, args):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"{directory}: not a directory")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".y4m", ".yuv"))
    if not paths:
        raise ValidationError(f"{directory}: no .y4m or .yuv clips")
    return [_read(p, args) for p in paths]


def cmd_dataset(args):
    clips = _pristine_clips(args.pristine, args)
    pairs = build_dataset(clips, DegradeSpec(args.strength), args.count, args.seed)
    save_dataset(pairs, args.out, args.strength, args.seed)
    logger.info("wrote %d pairs from %d clips to %s", len(pairs), len(clips), args.out)


def cmd_train(args):
    config = load_training_config(args.config) if args.config else TrainingConfig()
    pairs = load_dataset(args.dataset)
    model = load_checkpoint(args.resume, config.generator_config()) if args.resume else None

    def progress(step, loss):
        if step % args.log_every == 0:
            logger.info("step %d loss %.6f", step, loss)

    result = train(config, pairs, model, progress)
    save_checkpoint(result.model, args.out)
    logger.info("trained %d steps, final epoch loss %.6f", len(result.step_losses),
                result.epoch_losses[-1])


def cmd_enhance(args):
    model = load_checkpoint(args.model)
    clip = _read(args.input, args)
    out = enhance_clip(model, clip, pad_short=args.pad_short)
    if args.out:
        _write(out, args.out, args)
    if args.png_dir:
        write_png_sequence(convert_clip(out, RGB, args.matrix, args.full_range), args.png_dir)
    if not args.out and not args.png_dir:
        raise ValidationError("enhance needs --out and/or --png-dir")


def cmd_evaluate(args):
    model = load_checkpoint(args.model)
    decoded = _read(args.decoded, args)
    pristine = _read(args.pristine, args)
    report = evaluate(model, decoded, pristine, args.color, args.luma_only, args.matrix,
                      args.full_range)
    text = report.to_text()
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)


def _selftest_checks():
    from .loss import combined_loss
    from .model import GeneratorConfig, backward, forward
    from .synthetic import synthetic_clip
    from .tensor_core import finite_diff_check

    def identity():
        clip = synthetic_clip(100, 100, frames=4, seed=0)
        out = enhance_clip(init_generator(GeneratorConfig(hidden_width=8, residual_blocks=1)), clip)
        return float(np.abs(out.array() - clip.array()).max()) < 1e-12

    def psnr_oracle():
        a = np.zeros((3, 8, 8))
        return abs(metrics.psnr(a + 1 / 255, a) - 20 * math.log10(255)) < 1e-9

    def loss_gradient():
        rng = np.random.default_rng(0)
        t = rng.random((2, 24, 24))
        p = np.clip(t + 0.1 * rng.standard_normal(t.shape), 0, 1)
        g = combined_loss(p, t).grad
        res = finite_diff_check(lambda z: p.size * combined_loss(z, t).total, p, p.size * g,
                                coords=20, rng=rng)
        return res.max_rel_error < 1e-4

    def model_gradient():
        rng = np.random.default_rng(1)
        model = init_generator(GeneratorConfig(hidden_width=4, residual_blocks=1)).astype(np.float64)
        model.params["tail.weight"] = 0.1 * rng.standard_normal(model.params["tail.weight"].shape)
        x, proj = rng.random((9, 12, 12)), rng.standard_normal((9, 12, 12))
        _, tape = forward(model, x, record_tape=True)
        grads = backward(model, tape, proj)
        w0 = model.params["head.weight"].copy()

        def f(z):
            model.params["head.weight"] = z
            return float(np.sum(forward(model, x) * proj))

        res = finite_diff_check(f, w0, grads["head.weight"], coords=20, rng=rng)
        return res.max_rel_error < 1e-4

    return [("identity round trip", identity), ("psnr oracle", psnr_oracle),
            ("combined loss gradient", loss_gradient), ("model gradient", model_gradient)]


def cmd_selftest(args):
    print(f"kernels: {backend.name}")
    failed = 0
    for name, check in _selftest_checks():
        t0 = time.perf_counter()
        ok = check()
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({time.perf_counter() - t0:.2f}s)")
    if failed:
        raise NumericalError(f"{failed} self-test check(s) failed")


def build_parser():
    parser = _Parser(prog="triframe", description="Multi-frame CNN post-processing for decoded video.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="apply the blockwise DCT codec proxy to a clip")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--strength", type=float, required=True)
    p.add_argument("--out", required=True)
    _geometry_args(p)
    _output_args(p)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("dataset", help="build a training dataset from pristine clips")
    p.add_argument("--pristine", required=True, help="directory of .y4m (or raw .yuv) clips")
    p.add_argument("--strength", type=float, required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _geometry_args(p)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("train", help="train a generator checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="JSON file with training settings (defaults otherwise)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=10)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="restore a decoded clip")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out")
    p.add_argument("--png-dir", help="also write RGB PNG frames here")
    p.add_argument("--pad-short", action="store_true", help="accept clips of 1-2 frames")
    p.add_argument("--matrix", choices=("bt709", "bt601"), default="bt709")
    p.add_argument("--full-range", action="store_true")
    _geometry_args(p)
    _output_args(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="per-frame PSNR gain over the decoded anchor")
    p.add_argument("--model", required=True)
    p.add_argument("--decoded", required=True)
    p.add_argument("--pristine", required=True)
    p.add_argument("--color", choices=("ycbcr", "rgb"), default="ycbcr")
    p.add_argument("--luma-only", action="store_true")
    p.add_argument("--matrix", choices=("bt709", "bt601"), default="bt709")
    p.add_argument("--full-range", action="store_true")
    p.add_argument("--report")
    _geometry_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="quick numerical sanity checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TriframeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
