"""Command-line entry point: ``clvs <subcommand> [options]``.

Subcommands: gen-model, gen-scene, run, verify, analyze. The global flags
``--config``, ``--seed``, ``--out`` and ``--verify-tolerance`` are accepted
before or after the subcommand.

Exit codes: 0 success, 2 configuration error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..analysis import build_report, load_scene, write_report
from ..engine import save_model
from ..errors import ClvsError, ConfigError
from ..tracing import read_trace
from .config import load_config
from .runner import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, run_experiment
from .synth import gen_model, gen_scene

log = logging.getLogger("clvs")


def _globals(parser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="experiment config (JSON)")
    parser.add_argument("--seed", type=int, default=default, help="64-bit seed")
    parser.add_argument("--out", default=default, help="output file or directory")
    parser.add_argument(
        "--verify-tolerance",
        type=float,
        default=argparse.SUPPRESS if suppress else 1e-9,
        help="max abs engine/oracle difference (default 1e-9)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clvs", description=__doc__.splitlines()[0])
    _globals(parser, suppress=False)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="write a seeded random model file")
    _globals(p, suppress=True)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--head-dim", type=int, default=8)
    p.add_argument("--hidden", type=int, default=None, help="defaults to heads*head-dim")
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--rope-base", type=float, default=10000.0)
    p.add_argument("--logit-scale", type=float, default=1.0)

    p = sub.add_parser("gen-scene", help="write a seeded scene file of object overlaps")
    _globals(p, suppress=True)
    p.add_argument("--rows", type=int, default=3)
    p.add_argument("--cols", type=int, default=3)
    p.add_argument("--objects", type=int, default=1)

    p = sub.add_parser("run", help="run an experiment config")
    _globals(p, suppress=True)
    p.add_argument("--verify", action="store_true", help="also check every run against the oracle")
    p.add_argument("--mode", choices=["vanilla", "clvs", "scripted"], action="append", help="override config mode")

    p = sub.add_parser("verify", help="check engine against the oracle without writing traces")
    _globals(p, suppress=True)

    p = sub.add_parser("analyze", help="report on a vanilla/clvs trace pair")
    _globals(p, suppress=True)
    p.add_argument("--vanilla", required=True)
    p.add_argument("--clvs", required=True)
    p.add_argument("--scene")
    p.add_argument("--clip", type=float, default=100.0)
    return parser


def _require(args, name):
    value = getattr(args, name, None)
    if value is None:
        raise ConfigError("required for this subcommand", f"--{name.replace('_', '-')}")
    return value


def _cmd_gen_model(args):
    dims = {
        "n_layers": args.layers,
        "n_heads": args.heads,
        "head_dim": args.head_dim,
        "vocab": args.vocab,
        "rope_base": args.rope_base,
        "logit_scale": args.logit_scale,
    }
    if args.hidden is not None:
        dims["hidden"] = args.hidden
    if args.ffn_dim is not None:
        dims["ffn_dim"] = args.ffn_dim
    model = gen_model(args.seed or 0, dims)
    out = Path(_require(args, "out"))
    save_model(model, out)
    print(out)
    return EXIT_OK


def _cmd_gen_scene(args):
    scene = gen_scene(args.seed or 0, args.rows, args.cols, args.objects)
    out = Path(_require(args, "out"))
    out.write_text(json.dumps(scene, indent=2) + "\n", encoding="utf-8")
    print(out)
    return EXIT_OK


def _cmd_run(args, verify_only=False):
    cfg = load_config(_require(args, "config"), seed_override=args.seed)
    if getattr(args, "mode", None):
        cfg.modes = args.mode
    verify = verify_only or args.verify
    result = run_experiment(cfg, args.out, verify=verify, tol=args.verify_tolerance, write=not verify_only)
    for name, run in result.runs.items():
        print(f"{name}: tokens={run.generation.tokens}")
    for path in result.files:
        print(f"wrote {path}")
    if verify:
        if result.mismatches:
            for m in result.mismatches:
                print(f"MISMATCH {m}", file=sys.stderr)
            return EXIT_VERIFY
        print(f"verify: ok (tolerance {args.verify_tolerance:g})")
    return result.exit_code


def _cmd_analyze(args):
    vanilla = read_trace(args.vanilla)
    clvs = read_trace(args.clvs)
    scene = load_scene(args.scene) if args.scene else None
    report = build_report(vanilla, clvs, scene, args.clip)
    for path in write_report(report, _require(args, "out")):
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handlers = {
        "gen-model": _cmd_gen_model,
        "gen-scene": _cmd_gen_scene,
        "run": _cmd_run,
        "verify": lambda a: _cmd_run(a, verify_only=True),
        "analyze": _cmd_analyze,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ClvsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
