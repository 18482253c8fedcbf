"""``synth`` command line: one sub-command per pipeline stage.

Exit codes: 0 success, 2 validation error, 3 dependency error, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import DependencyError, RegistryLookupError, ValidationError
from .manifest import STAGES
from .stages import ARTIFACT_ROOT_ENV, run_stage

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_IO = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="synth",
        description=f"Run one stage of the synthesis pipeline. Artifacts go under ${ARTIFACT_ROOT_ENV} (default ./artifacts).",
    )
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", help="experiment config (YAML or JSON); optional for report")
    p.add_argument("--seed", type=int, help="experiment seed (default: config experiment.seed)")
    p.add_argument("--experiment", help="experiment id (default: config experiment.id or a config hash)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.config is None and args.experiment is None:
        print("error: --config is required (or --experiment for an existing experiment)", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        rec = run_stage(args.stage, args.config, args.seed, args.experiment)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DependencyError, RegistryLookupError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"{rec.stage}: {rec.run_dir} ({len(rec.outputs)} files, {rec.wall_time:.1f} s)")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
