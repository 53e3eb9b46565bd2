"""Command-line entry point.

Exit codes: 0 success, 1 validation or usage error, 2 equivalence check
failed. ``--json`` switches every report to JSON on stdout.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import serialization as sio
from .analysis import analyze
from .bench import run_bench
from .errors import ArchiveError, ValidationError
from .graph import build_model, model_forward
from .presets import PRESETS, preset
from .reparam import reparameterize_model, verify_equivalence

EXIT_OK, EXIT_INVALID, EXIT_VERIFY_FAILED = 0, 1, 2
SEED_ENV = "TMS_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV}={raw!r} is not an integer") from None


def _read_config(source: str) -> dict:
    """``source`` is a JSON file path, ``-`` for stdin, or a preset name."""
    if source == "-":
        text = sys.stdin.read()
    elif os.path.exists(source):
        with open(source) as fh:
            text = fh.read()
    else:
        try:
            return preset(source)
        except KeyError:
            raise UsageError(f"config {source!r} is neither a file nor a preset ({', '.join(PRESETS)})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2) if args.json else text)


def cmd_preset(args) -> int:
    print(json.dumps(preset(args.name), indent=2))
    return EXIT_OK


def cmd_build(args) -> int:
    cfg = _read_config(args.config)
    dtype = np.float64 if args.float64 else np.float32
    model = build_model(cfg, seed=args.seed, dtype=dtype)
    sio.save_weights(model, args.out)
    _emit(args, {"out": args.out, "seed": args.seed, "topology": model.topology},
          f"wrote {args.out} (seed {args.seed}, {model.topology})")
    return EXIT_OK


def cmd_reparam(args) -> int:
    cfg = _read_config(args.config)
    model = sio.load_weights(cfg, args.inp)
    rep = reparameterize_model(model)
    sio.save_weights(rep, args.out)
    _emit(args, {"out": args.out, "topology": rep.topology}, f"wrote {args.out} (rep)")
    return EXIT_OK


def cmd_verify(args) -> int:
    cfg = _read_config(args.config)
    a = sio.load_weights(cfg, args.regular)
    b = sio.load_weights(cfg, args.rep)
    report = verify_equivalence(a, b, trials=args.trials, frames=args.frames, tol=args.tol, seed=args.seed)
    verdict = "PASS" if report.passed else "FAIL"
    _emit(args, report.as_dict(),
          f"{verdict}: max |diff| {report.max_abs_diff:.3e} (rel {report.max_rel_diff:.3e}) "
          f"over {report.trials} trials, tol {report.tolerance:g}")
    return EXIT_OK if report.passed else EXIT_VERIFY_FAILED


def cmd_count(args) -> int:
    cfg = _read_config(args.config)
    model = build_model(cfg, seed=0, calibrate=False)
    if args.rep:
        model = reparameterize_model(model)
    report = analyze(model, args.frames)
    payload = {"topology": model.topology, **report.as_dict()}
    _emit(args, payload, report.to_text())
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _read_config(args.config)
    model = sio.load_weights(cfg, args.weights)
    stats = run_bench(model, frames=args.frames, repeats=args.repeats, warmup=args.warmup,
                      runs=args.runs, seed=args.seed)
    _emit(args, stats.as_dict(),
          f"{stats.model_tag}: mean {stats.mean_us:.1f} us, median {stats.median_us:.1f} us, "
          f"p5 {stats.p5_us:.1f} us, p95 {stats.p95_us:.1f} us "
          f"({stats.runs}x{stats.repeats} forwards, {stats.total_seconds:.1f} s timed)")
    return EXIT_OK


def cmd_forward(args) -> int:
    cfg = _read_config(args.config)
    model = sio.load_weights(cfg, args.weights)
    feats = sio.load_features(args.input)
    emb = model_forward(model, feats)
    sio.save_embedding(emb, args.out)
    _emit(args, {"out": args.out, "length": int(emb.shape[0])}, f"wrote {args.out} ({emb.shape[0]} values)")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable output")

    parser = _Parser(prog="tmsrep", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(fn=fn)
        return p

    p = add("preset", cmd_preset, "print an embedded config")
    p.add_argument("--name", required=True, help=f"one of {', '.join(PRESETS)} (unique prefix ok)")

    config_help = "config JSON file, preset name, or - for stdin"
    p = add("build", cmd_build, "build seeded regular weights")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--float64", action="store_true", help="store 64-bit weights")

    p = add("reparam", cmd_reparam, "convert regular weights to the single-path graph")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = add("verify", cmd_verify, "compare regular and rep embeddings")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--regular", required=True)
    p.add_argument("--rep", required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)

    p = add("count", cmd_count, "parameter and MAC counts")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--rep", action="store_true", help="count the re-parameterized graph")

    p = add("bench", cmd_bench, "single-threaded CPU latency benchmark")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--weights", required=True)
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--repeats", type=int, default=10_000)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=None)

    p = add("forward", cmd_forward, "embed one TMSF feature file")
    p.add_argument("--config", default="-", help=config_help)
    p.add_argument("--weights", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        if getattr(args, "seed", 0) is None:
            args.seed = _default_seed()
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValidationError, ArchiveError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
    except KeyError as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
    return EXIT_INVALID


def cli_dispatch(argv: Sequence[str]) -> int:
    """Run one subcommand and return its exit code."""
    return main(list(argv))


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
