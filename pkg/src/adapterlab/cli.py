"""Command-line entry point: one subcommand per pipeline stage, plus ``run`` for all of them."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import KNOWN_VARIANTS, desk_config, load_config, save_config, tiny_config
from .encoder import ConfigError
from .pipeline import STAGES, DependencyError, PipelineError, Runner, StaleArtifactError, workspace_root

PRESETS = {"desk": desk_config, "tiny": tiny_config}

EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_STALE, EXIT_PIPELINE = 2, 3, 4, 5


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", metavar="PATH", help="experiment config JSON (default: --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="built-in config when --config is absent")
    p.add_argument("--workspace", metavar="DIR", help="workspace root (overrides $ADAPTERLAB_WORKSPACE)")
    p.add_argument("--seed", type=int, action="append", metavar="N", help="restrict to this seed (repeatable)")
    p.add_argument("--variant", action="append", metavar="NAME", choices=KNOWN_VARIANTS,
                   help="restrict to this variant (repeatable)")
    p.add_argument("--force", action="store_true", help="rebuild artifacts whose recipe hash no longer matches")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="adapterlab",
                                     description="Adapter-based zero-shot cross-lingual transfer on toy languages")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    run = sub.add_parser("run", parents=[common], help="run every stage, or those named by --stage")
    run.add_argument("--stage", action="append", choices=STAGES, metavar="NAME", help="stage to run (repeatable)")
    st = sub.add_parser("status", parents=[common], help="list every artifact and whether it is fresh")
    st.add_argument("--stage", action="append", choices=STAGES, metavar="NAME")
    init = sub.add_parser("init-config", parents=[common], help="write the chosen preset to PATH")
    init.add_argument("out", metavar="PATH")
    return parser


def resolve_config(args):
    cfg = load_config(args.config) if args.config else PRESETS[args.preset]()
    return cfg.with_overrides(seeds=args.seed, variants=args.variant)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "init-config":
            save_config(cfg, args.out)
            print(f"wrote {args.out}")
            return 0
        runner = Runner(cfg, workspace_root(cfg, args.workspace))
        if args.command == "status":
            for key, node in runner.nodes.items():
                if not args.stage or node.stage in args.stage:
                    print(f"{runner.status(key):8s} {node.stage:18s} {key}")
            return 0
        stages = args.stage if args.command == "run" else [args.command]
        res = runner.run(stages, force=args.force)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as e:
        print(f"dependency error: {e}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except StaleArtifactError as e:
        print(f"stale artifact: {e}", file=sys.stderr)
        return EXIT_STALE
    except PipelineError as e:
        print(f"pipeline error: {e}", file=sys.stderr)
        return EXIT_PIPELINE
    print(f"workspace {runner.root}: built {len(res.built)}, reused {len(res.skipped)}, "
          f"training steps {res.train_steps}")
    if "report" in (stages or STAGES) and runner.status("report") == "fresh":
        print(runner.path("report/report.txt").read_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
