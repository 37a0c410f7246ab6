"""Command line wrapper around :func:`embed_export.export`.

    embed-export --corpus DIR --model ID --out DIR [--batch N]

Exit codes mirror the topic-model tool: 0 success, 1 usage or bad flag
values, 2 data problems (missing or malformed corpus, unknown or
unloadable model), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from nahtm.errors import ConfigError, DataError, NumericError

from .encoder import HASH_MODEL
from .export import export


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 on usage; route to our 1
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="embed-export",
        description="Export word, sentence, and document embeddings for a built corpus.",
    )
    parser.add_argument("--corpus", required=True, help="built corpus directory")
    parser.add_argument("--model", required=True,
                        help=f"encoder id; {HASH_MODEL} needs no downloads")
    parser.add_argument("--out", required=True, help="embedding store directory to write")
    parser.add_argument("--batch", type=int, default=64,
                        help="sentences per inference batch")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        manifest = export(args.corpus, args.model, args.out, batch=args.batch)
        note = (f", {len(manifest.missing_words)} words without pieces"
                if manifest.missing_words else "")
        print(f"model {manifest.model}, m={manifest.m} -> {args.out}{note}")
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
