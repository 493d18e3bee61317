"""Command line entry point: ``rtdenoise <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import augment as aug
from . import io
from .model import DemucsConfig, drywet, forward, init_params
from .objective import DEFAULT_BETA, total_loss
from .stream import DemucsStreamer, StreamReport, bench, running_scale
from .tensor import ShapeError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
TOY_CONFIG = "2,4,8,4,1,1"


class UsageError(Exception):
    pass


def parse_config(text: str) -> DemucsConfig:
    """``L,H,K,S,U,causal`` -> config, e.g. ``5,48,8,4,4,1``."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 6:
        raise UsageError(f"--config takes L,H,K,S,U,causal (6 fields), got {text!r}")
    try:
        depth, hidden, kernel, stride, resample = (int(p) for p in parts[:5])
    except ValueError:
        raise UsageError(f"--config fields L,H,K,S,U must be integers, got {text!r}") from None
    if parts[5] not in ("0", "1"):
        raise UsageError(f"--config causal flag must be 0 or 1, got {parts[5]!r}")
    try:
        return DemucsConfig(depth=depth, hidden=hidden, kernel=kernel, stride=stride,
                            resample=resample, causal=parts[5] == "1")
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.report == "json":
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text if text is not None else "\n".join(f"{k}: {v}" for k, v in payload.items()))


def _model(args):
    """Parameters from ``--model``, else a seeded random init of ``--config``."""
    config = parse_config(args.config) if args.config else None
    if args.model:
        params, stored = io.load_params(args.model, config)
        return params, stored
    return init_params(config or DemucsConfig(), args.seed), config or DemucsConfig()


def _check_dry(dry: float) -> None:
    if not 0.0 <= dry <= 1.0:
        raise UsageError(f"--dry must lie in [0, 1], got {dry}")


def cmd_init_weights(args) -> int:
    config = parse_config(args.config) if args.config else DemucsConfig()
    params = init_params(config, args.seed)
    io.save_params(args.out, params, config)
    _emit(args, {"out": str(args.out), "tensors": len(params),
                 "parameters": int(sum(p.size for p in params.values()))})
    return EXIT_OK


def cmd_enhance(args) -> int:
    _check_dry(args.dry)
    params, config = _model(args)
    x, rate = io.read_wav(args.input, force=args.force)
    scale = None
    norm = args.norm or ("running" if config.causal else "global")
    if norm == "running" and config.normalize:
        # the normalization the streamer sees, so enhance and stream-simulate agree
        scale = running_scale(x, config.floor)[0][None, None]
    y = forward(params, config, x[None, None], scale=scale)[0, 0]
    io.write_wav(args.output, drywet(x, y, args.dry), rate)
    _emit(args, {"out": str(args.output), "samples": int(x.size), "sample_rate": rate})
    return EXIT_OK


def cmd_stream_simulate(args) -> int:
    _check_dry(args.dry)
    if args.chunk_ms <= 0:
        raise UsageError("--chunk-ms must be positive")
    params, config = _model(args)
    x, rate = io.read_wav(args.input, force=args.force)
    streamer = DemucsStreamer(params, config, dry=args.dry)
    chunk = max(int(round(args.chunk_ms * rate / 1000)), 1)
    g = streamer.geometry
    report = StreamReport(g.total_frame_ms, g.stride_ms, g.lookahead_ms, g.stride, g.sample_rate)
    out = []
    for start in range(0, x.size, chunk):
        t0 = time.perf_counter()
        out.append(streamer.push(x[start:start + chunk]))
        report.frame_times.append(time.perf_counter() - t0)
    out.append(streamer.flush())
    io.write_wav(args.output, np.concatenate(out), rate)
    payload = report.to_dict()
    # times are per chunk; normalise by the chunk duration rather than the stride
    payload.update(chunk_samples=chunk, rtf=report.mean_frame_time / (chunk / rate), out=str(args.output))
    _emit(args, payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.seconds <= 0:
        raise UsageError("--seconds must be positive")
    params, config = _model(args)
    rng = np.random.default_rng(args.seed)
    signal = 0.1 * rng.standard_normal(int(args.seconds * config.sample_rate))
    report = bench(DemucsStreamer(params, config), signal, single_core=args.single_core)
    _emit(args, report.to_dict())
    return EXIT_OK


def cmd_loss(args) -> int:
    clean, _ = io.read_wav(args.clean, force=args.force)
    enhanced, _ = io.read_wav(args.enhanced, force=args.force)
    if clean.shape != enhanced.shape:
        raise io.DataError(f"length mismatch: {clean.size} vs {enhanced.size} samples")
    report = total_loss(clean[None, None], enhanced[None, None], beta=args.beta)
    _emit(args, report.to_dict(), f"total {report.total:.6g} (l1 {report.l1:.6g})")
    return EXIT_OK


def cmd_augment(args) -> int:
    if args.band_width is not None and not 0 < args.band_width < 1:
        raise UsageError("--band-width must lie in (0, 1)")
    if not 0 <= args.echo_p <= 1:
        raise UsageError("--echo-p must lie in [0, 1]")
    clean, rate = io.read_wav(args.clean, force=args.force)
    noise, _ = io.read_wav(args.noise, force=args.force)
    if clean.shape != noise.shape:
        raise io.DataError(f"length mismatch: {clean.size} vs {noise.size} samples")
    rng = np.random.default_rng(args.seed)
    batch = aug.PairBatch(clean[None, None], noise[None, None])
    max_shift = int(args.shift_ms * rate / 1000)
    if max_shift >= clean.size:
        raise UsageError(f"--shift-ms {args.shift_ms} exceeds the signal length")
    batch = aug.augment(batch, rng, max_shift=max_shift, band_width=args.band_width,
                        echo_p=args.echo_p, sample_rate=rate)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, signal in (("clean", batch.clean), ("noise", batch.noise), ("noisy", batch.noisy)):
        io.write_wav(out / f"{name}.wav", signal[0, 0], rate)
    _emit(args, {"out_dir": str(out), "samples": int(batch.shape[-1])})
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .train import gradcheck
    config = parse_config(args.config)
    rng = np.random.default_rng(args.seed)
    clean = 0.3 * rng.standard_normal((args.batch, 1, args.length))
    noisy = clean + 0.2 * rng.standard_normal(clean.shape)
    params = init_params(config, args.seed)
    report = gradcheck(params, config, (noisy, clean), h=args.h, per_tensor=args.per_tensor,
                       seed=args.seed)
    name, worst = report.worst
    _emit(args, report.to_dict(),
          "\n".join(f"{k:32s} {v:.3e}" for k, v in report.errors.items())
          + f"\nworst {name} {worst:.3e} -> {'PASS' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_train_toy(args) -> int:
    from .train import DivergenceError, overfit
    if args.steps < 0:
        raise UsageError("--steps must be >= 0")
    config = parse_config(args.config)
    clean, rate = io.read_wav(args.clean, force=args.force)
    if args.noise:
        noise, _ = io.read_wav(args.noise, force=args.force)
        if noise.shape != clean.shape:
            raise io.DataError("clean and noise lengths differ")
    else:
        noise = np.zeros_like(clean)
    max_shift = int(args.shift_ms * rate / 1000)
    params = init_params(config, args.seed)
    try:
        curve, params = overfit(params, config, clean, noise, args.steps, seed=args.seed, lr=args.lr,
                                max_shift=max_shift, beta=args.beta)
        status = EXIT_OK
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        curve, status = exc.curve, EXIT_NUMERIC
    with open(args.out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss"])
        writer.writerows((k, f"{v:.9g}") for k, v in enumerate(curve))
    if args.save and status == EXIT_OK:
        io.save_params(args.save, params, config)
    _emit(args, {"steps": len(curve) - 1, "initial": curve[0], "final": curve[-1],
                 "ratio": curve[-1] / curve[0], "out": str(args.out)})
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtdenoise", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--report", choices=("json", "text"), default="text")
    common.add_argument("--force", action="store_true", help="accept sample rates other than 16 kHz")
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", type=Path, help="weight file; default is a seeded random init")
    model.add_argument("--config", help="L,H,K,S,U,causal (default 5,48,8,4,4,1)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-weights", parents=[common], help="write a randomly initialised model")
    p.add_argument("--config")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_init_weights)

    p = sub.add_parser("enhance", parents=[common, model], help="offline enhancement of a WAV file")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--dry", type=float, default=0.0)
    p.add_argument("--norm", choices=("running", "global"),
                   help="input scaling: running std as in streaming (default for causal models) "
                        "or the std of the whole file")
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("stream-simulate", parents=[common, model], help="enhance by pushing fixed chunks")
    p.add_argument("input", type=Path)
    p.add_argument("output", type=Path)
    p.add_argument("--chunk-ms", type=float, default=16.0)
    p.add_argument("--dry", type=float, default=0.0)
    p.set_defaults(func=cmd_stream_simulate)

    p = sub.add_parser("bench", parents=[common, model], help="real-time factor of the streamer")
    p.add_argument("--seconds", type=float, default=5.0)
    p.add_argument("--single-core", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("loss", parents=[common], help="training objective between two WAV files")
    p.add_argument("clean", type=Path)
    p.add_argument("enhanced", type=Path)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("augment", parents=[common], help="augment a (clean, noise) pair")
    p.add_argument("clean", type=Path)
    p.add_argument("noise", type=Path)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--shift-ms", type=float, default=1000 * aug.DEFAULT_MAX_SHIFT_S)
    p.add_argument("--band-width", type=float, default=None)
    p.add_argument("--echo-p", type=float, default=0.0)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("grad-check", parents=[common], help="analytic vs finite-difference gradients")
    p.add_argument("--config", default=TOY_CONFIG)
    p.add_argument("--length", type=int, default=1200)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--per-tensor", type=int, default=4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("train-toy", parents=[common], help="overfit one pair, write the loss curve")
    p.add_argument("clean", type=Path)
    p.add_argument("noise", type=Path, nargs="?")
    p.add_argument("--config", default=TOY_CONFIG)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--shift-ms", type=float, default=10.0)
    p.add_argument("--out", type=Path, default=Path("curve.csv"))
    p.add_argument("--save", type=Path, help="write the trained weights here")
    p.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits with status 2
    except (io.DataError, ShapeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
