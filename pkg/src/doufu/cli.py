"""Command line entry point: ``doufu <stage> --config exp.ini``."""
from __future__ import annotations

import argparse
import logging
import sys

from .core import TrajectoryError
from .model import ModelError, NumericFailure
from .pipeline import (ConfigError, MissingArtifact, WorkspaceBusy, load_config, render_config,
                       run_stage)
from .roadgraph import GraphError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("doufu")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="doufu", description="trajectory representation pipeline")
    p.add_argument("stage", choices=["gen", "featurize", "pretrain", "train", "embed", "eval",
                                     "all", "compare", "show-config"])
    p.add_argument("--config", help="INI experiment config (defaults apply when omitted)")
    p.add_argument("--workspace", help="override the workspace directory")
    p.add_argument("--variant", help="restrict train/embed/eval to one model variant")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.workspace)
        if args.stage == "show-config":
            sys.stdout.write(render_config(cfg))
            return EXIT_OK
        run_stage(args.stage, cfg, args.variant, log=log.info)
    except (ConfigError, WorkspaceBusy) as exc:
        log.error(f"config error: {exc}")
        return EXIT_CONFIG
    except MissingArtifact as exc:
        log.error(f"error: {exc}")
        return EXIT_MISSING
    except (NumericFailure, FloatingPointError) as exc:
        log.error(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (TrajectoryError, ModelError, GraphError) as exc:
        log.error(f"error: {exc}")
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
