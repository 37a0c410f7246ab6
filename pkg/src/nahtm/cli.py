"""Command-line entry points.

    nahtm build INPUT [INPUT ...] --out DIR     preprocess raw text
    nahtm synth-embed --corpus DIR --out DIR    deterministic stand-in embeddings
    nahtm train --corpus DIR --out DIR          fit a model
    nahtm eval --corpus DIR --model CKPT        score a checkpoint
    nahtm grid --corpus DIR --grid FILE         exhaustive hyperparameter search

Exit codes: 0 success, 1 bad usage or configuration, 2 missing or
inconsistent data, 3 numeric failure during optimization.

Configuration files are flat ``key = value`` lines; ``#`` starts a
comment line and blank lines are ignored.  Keys are the fields of
:class:`~nahtm.trainer.TrainConfig`; anything else is rejected.  Grid
files use the same syntax with comma-separated value lists.  Precedence
is config file, then command-line flags, then the ``NAHTM_SEED``
environment variable (which overrides the training seed only).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

from .corpus import PreprocessOptions, build_corpus, load_corpus, save_corpus, split_corpus
from .embeddings import load_embeddings, save_embeddings, synth_embeddings
from .errors import ConfigError, DataError, NumericError
from .evaluate import evaluate, plot_history_svg
from .model import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, grid_search, train, write_history_csv

__all__ = ["main"]

_CONFIG_TYPES = {f.name: f.type for f in fields(TrainConfig)}


class _Parser(argparse.ArgumentParser):
    """argparse normally exits with status 2 on usage errors; usage errors
    here are configuration errors and must exit with 1."""

    def error(self, message):
        raise ConfigError(message)


def _parse_scalar(key: str, raw: str, where: str):
    kind = _CONFIG_TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "false"):
                return low == "true"
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind} for key {key!r}")


def _config_lines(path: Path):
    if not path.is_file():
        raise DataError(f"config file {path} does not exist")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        yield lineno, key, value


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    out: dict = {}
    for lineno, key, value in _config_lines(path):
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        out[key] = _parse_scalar(key, value, f"{path}:{lineno}")
    return out


def read_grid_file(path: str | Path) -> dict:
    path = Path(path)
    out: dict = {}
    for lineno, key, value in _config_lines(path):
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate grid key {key!r}")
        where = f"{path}:{lineno}"
        parts = [p.strip() for p in value.split(",")]
        if not all(parts):
            raise ConfigError(f"{where}: empty value in list for {key!r}")
        out[key] = [_parse_scalar(key, p, where) for p in parts]
    return out


def write_config_file(config: TrainConfig, path: str | Path) -> None:
    """The resolved configuration in the same format the parser reads, so
    a run can always be reproduced from its output directory."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _resolved_config(args) -> TrainConfig:
    merged = read_config_file(args.config) if args.config else {}
    for flag, key in [
        ("k", "k"), ("variant", "variant"), ("seed", "seed"),
        ("epochs", "max_epochs"), ("batch_size", "batch_size"),
        ("learning_rate", "learning_rate"), ("patience", "patience"),
    ]:
        value = getattr(args, flag, None)
        if value is not None:
            merged[key] = value
    env = os.environ.get("NAHTM_SEED")
    if env is not None:
        try:
            merged["seed"] = int(env)
        except ValueError:
            raise ConfigError(f"NAHTM_SEED must be an integer, got {env!r}")
    config = TrainConfig.from_dict(merged)
    config.validate()
    return config


def _load_embeddings_arg(args, corpus):
    if args.embeddings and args.synth_embeddings:
        raise ConfigError("give either --embeddings or --synth-embeddings, not both")
    if args.embeddings:
        return load_embeddings(args.embeddings, corpus)
    if args.synth_embeddings:
        m, seed = args.synth_embeddings
        return synth_embeddings(corpus, m=m, seed=seed)
    return None


def _read_documents(paths: list[str]) -> list[str]:
    docs: list[str] = []
    for name in paths:
        p = Path(name)
        if p.is_dir():
            files = sorted(p.glob("*.txt"))
            if not files:
                raise DataError(f"directory {p} contains no .txt files")
            docs.extend(f.read_text(encoding="utf-8") for f in files)
        elif p.is_file() and p.suffix == ".jsonl":
            for lineno, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(f"{p}:{lineno}: bad JSON ({e})")
                if not isinstance(rec, dict) or "text" not in rec:
                    raise DataError(f"{p}:{lineno}: expected an object with a 'text' key")
                docs.append(str(rec["text"]))
        elif p.is_file():
            docs.extend(line for line in p.read_text(encoding="utf-8").splitlines()
                        if line.strip())
        else:
            raise DataError(f"input {p} does not exist")
    if not docs:
        raise DataError("no documents found in the given inputs")
    return docs


def cmd_build(args) -> None:
    opts = PreprocessOptions(
        max_vocab=args.max_vocab,
        max_sentences=args.max_sentences,
        min_token_len=args.min_token_len,
        remove_stopwords=not args.keep_stopwords,
        stem=args.stem,
        doc_bow_capped=args.capped_doc_bow,
        extra_stopwords=tuple(
            w for w in (args.extra_stopwords or "").split(",") if w
        ),
    )
    try:
        ratios = tuple(float(r) for r in args.ratios.split(","))
    except ValueError:
        raise ConfigError(f"--ratios must be three comma-separated numbers, got {args.ratios!r}")
    if len(ratios) != 3:
        raise ConfigError(f"--ratios must have three parts, got {args.ratios!r}")
    corpus = build_corpus(_read_documents(args.inputs), opts)
    split_corpus(corpus, ratios, seed=args.seed)
    save_corpus(corpus, args.out)
    s = corpus.summary()
    print(f"{s['num_docs']} documents, vocabulary {s['vocab_size']}, "
          f"{s['total_sentences']} sentences -> {args.out}")


def cmd_synth_embed(args) -> None:
    corpus = load_corpus(args.corpus)
    emb = synth_embeddings(corpus, m=args.m, seed=args.seed)
    save_embeddings(emb, args.out)
    print(f"synthetic embeddings m={args.m} for {corpus.num_docs} documents -> {args.out}")


def cmd_train(args) -> None:
    config = _resolved_config(args)
    corpus = load_corpus(args.corpus)
    embeddings = _load_embeddings_arg(args, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    result = train(corpus, embeddings, config, log=log)
    save_checkpoint(
        out / "model.ckpt", result.params, result.hyper,
        step=result.best_epoch,
        extra={
            "best_valid_perplexity": result.best_valid_perplexity,
            "stopped_early": result.stopped_early,
            "seed": config.seed,
        },
    )
    write_history_csv(result.history, out / "history.csv")
    plot_history_svg(result.history, out / "history.svg")
    write_config_file(config, out / "config.txt")
    print(f"best epoch {result.best_epoch}, "
          f"valid perplexity {result.best_valid_perplexity:.4f} -> {out}")


def cmd_eval(args) -> None:
    corpus = load_corpus(args.corpus)
    params, hyper, header = load_checkpoint(args.model)
    embeddings = _load_embeddings_arg(args, corpus)
    reference = load_corpus(args.reference) if args.reference else None
    metrics = evaluate(
        params, hyper, corpus, embeddings,
        reference=reference, split=args.split, top_n=args.top_n,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(
        json.dumps(metrics, indent=2) + "\n", encoding="utf-8"
    )
    lines = []
    for i, rec in enumerate(metrics["topics"]):
        npmi = "n/a" if rec["npmi"] is None else f"{rec['npmi']:+.4f}"
        lines.append(f"topic {i:02d}  npmi {npmi}  " + " ".join(rec["words"]))
    (out / "topics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"doc perplexity {metrics['doc_perplexity']:.4f}, "
          f"sentence perplexity {metrics['sent_perplexity']:.4f} -> {out}")


def cmd_grid(args) -> None:
    base = _resolved_config(args)
    grid = read_grid_file(args.grid)
    corpus = load_corpus(args.corpus)
    embeddings = _load_embeddings_arg(args, corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else print
    best, records = grid_search(corpus, embeddings, base, grid, log=log)
    (out / "grid.json").write_text(
        json.dumps({"records": records, "best": best.to_dict()}, indent=2) + "\n",
        encoding="utf-8",
    )
    write_config_file(best, out / "best_config.txt")
    winner = min(records, key=lambda r: r["best_valid_perplexity"])
    print(f"best {winner['settings']} "
          f"valid perplexity {winner['best_valid_perplexity']:.4f} -> {out}")


def _add_embedding_args(sub) -> None:
    sub.add_argument("--embeddings", help="directory with saved embeddings")
    sub.add_argument(
        "--synth-embeddings", nargs=2, type=int, metavar=("M", "SEED"),
        help="generate stand-in embeddings of width M with the given seed",
    )


def _add_config_args(sub) -> None:
    sub.add_argument("--config", help="key = value configuration file")
    sub.add_argument("--k", type=int, help="number of topics")
    sub.add_argument("--variant", help="sentence regularizer: KL, HKL, S1, or S2")
    sub.add_argument("--seed", type=int, help="training seed")
    sub.add_argument("--epochs", type=int, help="maximum training epochs")
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--learning-rate", type=float, dest="learning_rate")
    sub.add_argument("--patience", type=int, help="epochs without improvement before stopping")
    sub.add_argument("--quiet", action="store_true", help="suppress per-epoch output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nahtm", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="command", required=True)

    b = subs.add_parser("build", help="preprocess raw text into a corpus directory")
    b.add_argument("inputs", nargs="+",
                   help=".txt directory, .jsonl with 'text' records, or one document per line")
    b.add_argument("--out", required=True)
    b.add_argument("--max-vocab", type=int, default=10000)
    b.add_argument("--max-sentences", type=int, default=50)
    b.add_argument("--min-token-len", type=int, default=2)
    b.add_argument("--keep-stopwords", action="store_true")
    b.add_argument("--stem", action="store_true")
    b.add_argument("--capped-doc-bow", action="store_true",
                   help="count only the retained sentences in document bags")
    b.add_argument("--extra-stopwords", help="comma-separated additions to the stopword list")
    b.add_argument("--ratios", default="0.6,0.2,0.2",
                   help="train,valid,test fractions (must sum to 1)")
    b.add_argument("--seed", type=int, default=0, help="split assignment seed")
    b.set_defaults(func=cmd_build)

    s = subs.add_parser("synth-embed", help="write deterministic stand-in embeddings")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--m", type=int, required=True, help="embedding width")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_embed)

    t = subs.add_parser("train", help="fit a model and save the best checkpoint")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    _add_config_args(t)
    _add_embedding_args(t)
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="score a checkpoint and extract topics")
    e.add_argument("--corpus", required=True)
    e.add_argument("--model", required=True, help="checkpoint file")
    e.add_argument("--out", required=True)
    e.add_argument("--split", default="test", choices=("train", "valid", "test"))
    e.add_argument("--top-n", type=int, default=10, dest="top_n")
    e.add_argument("--reference", help="corpus directory for external coherence")
    _add_embedding_args(e)
    e.set_defaults(func=cmd_eval)

    g = subs.add_parser("grid", help="exhaustive search over a settings grid")
    g.add_argument("--corpus", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--grid", required=True, help="key = v1, v2, ... file")
    _add_config_args(g)
    _add_embedding_args(g)
    g.set_defaults(func=cmd_grid)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
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
