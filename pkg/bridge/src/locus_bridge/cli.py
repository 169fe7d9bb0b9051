"""`locus-bridge encode --in queries.jsonl --encoder NAME --out DIR`"""

from __future__ import annotations

import argparse
import sys

from .encode import ENCODERS, BridgeError, encode_file


def build_parser():
    parser = argparse.ArgumentParser(prog="locus-bridge")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    p = sub.add_parser("encode", help="encode a JSONL query file")
    p.add_argument("--in", dest="input", required=True,
                   help="JSONL with one {id, dataset, text} object per line")
    p.add_argument("--encoder", default="all-mpnet-base-v2",
                   choices=sorted(ENCODERS))
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        paths = encode_file(args.input, args.encoder, args.out,
                            batch_size=args.batch_size)
    except BridgeError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
