"""Command-line entry point: ``trend run|demos|sweep|fixture``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .annotate import probe_pairs, scripted_label, vlm_fixture_tokens, write_fixture
from .config import ConfigError, load_config
from .demos import generate_demos, load_demos, save_demos
from .envs import EnvKind
from .runner import NumericFailure, run_experiment, save_checkpoint, sweep, write_metrics

log = logging.getLogger("trend")

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def parse_seeds(text: str) -> list[int]:
    """``"0,1,2"``, ``"0 1 2"`` or a range ``"0-4"``."""
    seeds: list[int] = []
    for part in text.replace(",", " ").split():
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed).validate()
    demos = load_demos(args.demos) if args.demos else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(config, demos=demos, progress=args.verbose)
    csv_path = out / f"metrics_seed{config.seed}.csv"
    write_metrics(result.rows, csv_path)
    save_checkpoint(result, out / f"checkpoint_seed{config.seed}.npz")
    print(csv_path)
    return 0


def cmd_demos(args) -> int:
    demos = generate_demos(args.env, args.n, args.seed)
    save_demos(demos, args.out)
    print(f"wrote {len(demos.trajectories)} demonstrations ({len(demos)} steps) to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    config = load_config(args.config)
    summary = sweep(config, args.seeds, args.out, args.jobs)
    print(summary)
    return 0


def cmd_fixture(args) -> int:
    pairs = probe_pairs(args.env, args.seed, args.pairs, args.segment_len)
    clean = [scripted_label(s0, s1) for s0, s1 in pairs]
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0xF1C]))
    tokens = vlm_fixture_tokens(clean, args.noise_rate, rng, args.skip_rate)
    write_fixture(args.out, tokens)
    answered = [(t, c) for t, c in zip(tokens, clean) if t != "no_preference"]
    wrong = sum((t == "prefer0") != (c == (1.0, 0.0)) for t, c in answered)
    rate = wrong / len(answered) if answered else float("nan")
    print(f"wrote {len(tokens)} responses to {args.out}; disagreement with oracle {rate:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trend", description="Noise-robust preference-based RL at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one seeded experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--demos", default=None, help="demo file to use instead of generating")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("demos", help="expert demonstrations")
    dsub = p.add_subparsers(dest="demos_command", required=True)
    g = dsub.add_parser("generate")
    g.add_argument("--env", required=True, choices=[k.value for k in EnvKind])
    g.add_argument("--n", type=int, required=True, choices=(1, 2, 3))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_demos)

    p = sub.add_parser("sweep", help="independent runs over several seeds plus a summary")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", type=parse_seeds, required=True, help="e.g. 0,1,2 or 0-4")
    p.add_argument("--out", default="sweep_out")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fixture", help="mock VLM fixtures")
    fsub = p.add_subparsers(dest="fixture_command", required=True)
    g = fsub.add_parser("gen-vlm")
    g.add_argument("--noise-rate", type=float, required=True)
    g.add_argument("--pairs", type=int, required=True)
    g.add_argument("--env", default="point_reach", choices=[k.value for k in EnvKind])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skip-rate", type=float, default=0.0)
    g.add_argument("--segment-len", type=int, default=50)
    g.add_argument("--out", default="vlm_fixture.txt")
    g.set_defaults(func=cmd_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
