"""dfbs-extract: pull a classifier head out of a checkpoint into a DFBS file.

    dfbs-extract model.pt --out head.dfbs
    dfbs-extract model.onnx --out head.dfbs --format onnx
    dfbs-extract model.pt --out head.dfbs --weight-name fc.weight --bias-name fc.bias

Prints a JSON summary (K, D, tensor names, dtype conversions) to stdout.
Exit codes: 0 ok, 1 usage error, 2 extraction error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from dfbs_extractor.errors import ExtractionError
from dfbs_extractor.extract import ExtractionRule, extract


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dfbs-extract", description=__doc__)
    parser.add_argument("checkpoint")
    parser.add_argument("--out", required=True, help="output .dfbs path")
    parser.add_argument("--format", choices=("auto", "state-dict", "onnx"), default="auto")
    parser.add_argument("--weight-name", help="explicit weight tensor name")
    parser.add_argument("--bias-name", help="explicit bias tensor name")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    if not Path(args.checkpoint).is_file():
        print(f"dfbs-extract: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    rule = ExtractionRule(
        format=args.format,
        weight_name=args.weight_name,
        bias_name=args.bias_name,
    )
    try:
        summary = extract(args.checkpoint, rule, args.out)
    except (ExtractionError, OSError) as exc:
        print(f"dfbs-extract: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.to_dict(), indent=1))
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
