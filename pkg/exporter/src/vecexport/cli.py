"""Command line for the vector exporter."""

from __future__ import annotations

import argparse
import sys

from .encoders import EncoderLoadError
from .export import ExportConfig, export_corpus


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecexport",
        description="Encode corpus documents into the engine's vector file")
    parser.add_argument("--doctors", required=True)
    parser.add_argument("--dialogues", required=True)
    parser.add_argument("--model", required=True,
                        help="Hugging Face model id, or debug:<dim> for the "
                             "deterministic offline encoder")
    parser.add_argument("--pooling", choices=("cls", "mean"), default="mean")
    parser.add_argument("--max-tokens", dest="max_tokens", type=int, default=512)
    parser.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    parser.add_argument("--include", default="profiles,dialogues,queries",
                        help="comma list of sections to export")
    parser.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExportConfig(model=args.model, pooling=args.pooling,
                       max_tokens=args.max_tokens, batch_size=args.batch_size,
                       include=tuple(s.strip() for s in args.include.split(",") if s.strip()))
    try:
        count = export_corpus(args.doctors, args.dialogues, args.out, cfg)
    except EncoderLoadError as exc:
        print(f"encoder error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as exc:
        print(f"export error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {count} vectors to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
