"""Command-line entry points: export-features and export-text."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import backbones, exporting


def _run(fn) -> int:
    try:
        fn()
        return 0
    except backbones.SetupError as exc:
        print(f"setup error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main_features(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-features",
        description="export per-image backbone feature pyramids as NPFT files",
    )
    parser.add_argument("--data", type=Path, required=True, help="dataset category directory")
    parser.add_argument("--backbone", default=backbones.FALLBACK_BACKBONE,
                        help="backbone name (default: the deterministic seeded pyramid)")
    parser.add_argument("--levels", default="1,2,3,4,5", help="comma-separated levels")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--weights", type=Path, default=None,
                        help="weight bundle root (default: $AFE_WEIGHTS)")
    args = parser.parse_args(argv)
    levels = [v for v in args.levels.split(",") if v.strip()]
    return _run(lambda: exporting.export_features(
        args.data, args.backbone, levels, args.out, args.weights
    ))


def main_text(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="export-text",
        description="export a caption embedding as an NPFT vector",
    )
    parser.add_argument("--caption", required=True)
    parser.add_argument("--out", type=Path, required=True, help="output file")
    parser.add_argument("--encoder", default=backbones.FALLBACK_TEXT_ENCODER,
                        help="text encoder name (default: the deterministic hash embedding)")
    parser.add_argument("--weights", type=Path, default=None,
                        help="weight bundle root (default: $AFE_WEIGHTS)")
    args = parser.parse_args(argv)
    return _run(lambda: exporting.export_text_embedding(
        args.caption, args.out, args.encoder, args.weights
    ))


if __name__ == "__main__":
    sys.exit(main_features())
