"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input validation error, 3
numerical failure at run time.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import load_config
from .kernels import NumericalError
from .merge import ScheduleError, normalize_order
from .needle import TrainingDiverged
from .ppm import load_frames
from .prompt import assemble_sandwich, tokenize_stub
from .vision import ConfigError, Frame, VisionEncoder, encode_video, merge_applies, preset
from .weights_io import load_weights, save_module

log = logging.getLogger("linvid")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _shared(p):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output path (stdout when omitted)")
    p.add_argument("--precision", choices=("single", "double"))
    p.add_argument("--order", choices=("asc", "desc", "random"))
    p.add_argument("--keep-ratio", type=float)
    p.add_argument("--policy", choices=("always", "multi-frame-only"))
    p.add_argument("--trace", action="store_true", help="include per-layer merge traces")
    p.add_argument("--preset", help="encoder preset (toy, siglip384, needle)")


def build_parser():
    ap = argparse.ArgumentParser(prog="linvid", description="Linear-time video token pipeline tools")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("encode", help="encode a directory of PPM frames")
    _shared(p)
    p.add_argument("frames", help="directory of .ppm files")
    p.add_argument("--prefix", help="instruction text before the visual tokens")
    p.add_argument("--suffix", help="instruction text after the visual tokens")
    p.add_argument("--dump-tokens", action="store_true", help="include token embeddings")

    p = sub.add_parser("bench-mem", help="memory scaling over frame counts")
    _shared(p)
    p.add_argument("--frames", type=int, nargs="+", help="frame counts (ascending)")
    p.add_argument("--max-seconds", type=float, help="stop early and emit a partial report")
    p.add_argument("--dat", help="gnuplot data file")

    p = sub.add_parser("bench-latency", help="per-token step latency over prefix lengths")
    _shared(p)
    p.add_argument("--prefixes", type=int, nargs="+", help="prefix lengths (ascending)")
    p.add_argument("--samples", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--dat", help="gnuplot data file")

    p = sub.add_parser("ablate", help="token order or keep-ratio sweep (CSV)")
    _shared(p)
    p.add_argument("--axis", choices=("order", "ratio"), required=True)
    p.add_argument("--ratios", type=float, nargs="+")

    p = sub.add_parser("toy-train", help="train the marked-frame task end to end")
    _shared(p)
    p.add_argument("--weights", help="write trained weights here")

    p = sub.add_parser("inspect", help="merge schedule, traces and prompt layout; or a weight file header")
    _shared(p)
    p.add_argument("frames", nargs="?", help="directory of .ppm files")
    p.add_argument("--n-frames", type=int, default=2, help="synthetic frames when no directory is given")
    p.add_argument("--prefix", default="")
    p.add_argument("--suffix", default="")
    p.add_argument("--weights", help="describe a weight file instead")

    for name in ("bench-mem", "bench-latency", "ablate", "toy-train"):
        sp = sub.choices[name]
        sp.add_argument("--train-samples", type=int)
        sp.add_argument("--test-samples", type=int)
        sp.add_argument("--epochs", type=int)
    return ap


def _config(args):
    cfg = load_config(args.config)
    if args.preset:
        cfg.encoder = preset(args.preset)
        cfg.encoder_preset = args.preset
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
        cfg.needle.seed = args.seed
    if args.precision:
        cfg.precision = args.precision
        cfg.train.precision = args.precision
    for k in ("train_samples", "test_samples", "epochs"):
        if getattr(args, k, None) is not None:
            setattr(cfg.train, k, getattr(args, k))
    order = normalize_order(args.order) if args.order else None
    return cfg.with_overrides(keep_ratio=args.keep_ratio, sort_order=order, merge_policy=args.policy)


def _emit(args, text):
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _text_table(d):
    return np.random.default_rng([d, 11]).standard_normal((256, d))


def _frames_report(cfg, frames, names, args, embeddings=False):
    enc = cfg.encoder
    _, t_dt = bench.dtype_for(cfg.precision)
    encoder = VisionEncoder(enc, seed=cfg.seed, dtype=t_dt)
    out = encode_video(frames, enc, encoder, seed=cfg.seed, trace=args.trace)
    merged = merge_applies(enc, len(frames))
    rep = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "merged": merged,
        "schedule": enc.schedule().to_dict() if merged else None,
        "frames": [],
    }
    for name, fe in zip(names, out):
        if not np.isfinite(fe.array()).all():
            raise NumericalError(f"non-finite embedding in frame {name}")
        item = {"index": fe.frame_index, "file": name, "tokens": len(fe), "sizes": fe.tokens.sizes().tolist(),
                "origins": fe.tokens.origins().tolist()}
        if args.trace:
            item["trace"] = fe.trace
        if embeddings:
            item["embeddings"] = fe.array().tolist()
        rep["frames"].append(item)
    rep["tokens_per_frame"] = [f["tokens"] for f in rep["frames"]]
    if args.prefix is not None or args.suffix is not None:
        pre, suf = tokenize_stub(args.prefix or ""), tokenize_stub(args.suffix or "")
        _, layout = assemble_sandwich(pre, out, suf, _text_table(enc.d_llm))
        rep["layout"] = {"prefix": pre.source_text, "suffix": suf.source_text, **layout.to_dict()}
    return rep


def cmd_encode(args, cfg):
    frames, names = load_frames(args.frames)
    rep = {"kind": "encode", **_frames_report(cfg, frames, names, args, args.dump_tokens)}
    _emit(args, bench.dumps(rep))


def cmd_inspect(args, cfg):
    if args.weights:
        tensors, meta = load_weights(args.weights)
        rep = {"kind": "inspect-weights", "meta": meta,
               "tensors": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in sorted(tensors.items())}}
        _emit(args, bench.dumps(rep))
        return
    if args.frames:
        frames, names = load_frames(args.frames)
    else:
        if args.n_frames < 1:
            raise ConfigError("--n-frames must be >= 1")
        rng = np.random.default_rng([cfg.seed, 5])
        side = cfg.encoder.image_side
        frames = [Frame(rng.integers(0, 256, (side, side, 3), dtype=np.uint8), i) for i in range(args.n_frames)]
        names = [f"synthetic-{i}" for i in range(args.n_frames)]
    args.trace = True
    rep = {"kind": "inspect", **_frames_report(cfg, frames, names, args)}
    _emit(args, bench.dumps(rep))


def cmd_bench_mem(args, cfg):
    cfg.encoder.schedule()
    rep = bench.bench_mem(cfg, args.frames, args.max_seconds, log=log.info)
    if args.dat:
        bench.write_dat(args.dat, rep)
    _emit(args, bench.dumps(rep))


def cmd_bench_latency(args, cfg):
    if args.samples is not None:
        if args.samples < 100:
            raise ConfigError("--samples must be >= 100")
        cfg.bench.samples = args.samples
    if args.d_model is not None:
        cfg.bench.latency_d_model = args.d_model
    rep = bench.bench_latency(cfg, args.prefixes, log=log.info)
    if args.dat:
        bench.write_dat(args.dat, rep)
    _emit(args, bench.dumps(rep))


def cmd_ablate(args, cfg):
    if args.ratios:
        cfg.ablate.ratios = args.ratios
        cfg.ablate.__post_init__()
    _emit(args, bench.ablate(cfg, args.axis, log=log.info))


def cmd_toy_train(args, cfg):
    try:
        rep, model = bench.toy_train(cfg, log=log.info)
    except TrainingDiverged as e:
        if args.weights:
            from .weights_io import save_weights

            save_weights(args.weights, e.checkpoint, meta={"config": cfg.to_dict(), "epoch": e.epoch})
        raise
    if args.weights:
        save_module(args.weights, model, meta={"config": cfg.to_dict()})
    _emit(args, bench.dumps(rep))


COMMANDS = {
    "encode": cmd_encode,
    "inspect": cmd_inspect,
    "bench-mem": cmd_bench_mem,
    "bench-latency": cmd_bench_latency,
    "ablate": cmd_ablate,
    "toy-train": cmd_toy_train,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        cfg = _config(args)
        COMMANDS[args.cmd](args, cfg)
    except (NumericalError, TrainingDiverged, ArithmeticError) as e:
        print(f"linvid: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ScheduleError, ValueError, OSError) as e:
        print(f"linvid: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
