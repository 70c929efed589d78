"""Command-line entry point.

Exit codes: 0 success, 2 config error, 3 missing/mismatched artifact,
4 numeric failure during training or optimization.
"""

import argparse
import sys

from . import autodiff as ad
from . import pipeline as pl
from .model import TrainingError
from .trigger_opt import TriggerOptimizationError

EXIT_CONFIG = 2
EXIT_ARTIFACT = 3
EXIT_NUMERIC = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="backdoorkit",
        description="Invisible backdoor attacks on small image classifiers: "
                    "steganographic and norm-regularized triggers, poisoning, "
                    "evaluation, and trigger reverse-engineering detection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in pl.STAGES.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None,
                       help="INI-style experiment config (defaults used when omitted)")
        p.add_argument("--out", default="out", help="artifact directory")
        p.add_argument("--force", action="store_true",
                       help="allow artifacts from mismatched configs")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = pl.PipelineConfig.from_file(args.config) if args.config \
            else pl.PipelineConfig.defaults()
        result = pl.STAGES[args.command](cfg, args.out, force=args.force)
    except pl.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT
    except (TrainingError, TriggerOptimizationError, ad.NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    paths = result.get("paths", {})
    for key in ("report", "sweep_report", "detect_report"):
        path = paths.get(key)
        if path:
            try:
                with open(path, encoding="utf-8") as f:
                    sys.stdout.write(f.read())
                break
            except OSError:
                pass
    return 0


if __name__ == "__main__":
    sys.exit(main())
