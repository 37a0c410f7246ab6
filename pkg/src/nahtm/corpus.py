"""Corpus preprocessing and the bag-of-words data structures.

Documents are lowercased, segmented into sentences on ``.``, ``!`` or ``?``
followed by whitespace, and tokenized to alphabetic runs.  Stopwords and
short tokens go first, then the vocabulary keeps the most frequent words
(ties broken alphabetically).  Per document we retain at most
``max_sentences`` sentences for the sentence-level model; the document
bag-of-words covers the full token stream unless ``doc_bow_capped`` is set,
in which case it is exactly the sum of the retained sentence rows.

Sentences that lose every token to filtering are dropped, and documents
with no surviving sentence or no in-vocabulary token are dropped entirely.

A corpus round-trips through a directory of three files::

    vocab.txt    one word per line, line number = word index
    docs.jsonl   one JSON record per document
    meta.json    sizes, options, word frequencies
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError

__all__ = [
    "BowCorpus",
    "PreprocessOptions",
    "Vocabulary",
    "build_corpus",
    "load_corpus",
    "save_corpus",
    "split_corpus",
    "STOPWORDS",
]

FORMAT_VERSION = 1

SPLITS = ("train", "valid", "test")

_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")
_TOKEN = re.compile(r"[a-z]+")

# Compact English stopword list; enough to keep function words out of the
# vocabulary without pulling in an external resource.
STOPWORDS = frozenset("""
a about above after again against all am an and any are as at be because been
before being below between both but by can could did do does doing down during
each few for from further had has have having he her here hers herself him
himself his how i if in into is it its itself just me more most my myself no
nor not now of off on once only or other our ours ourselves out over own s
same she should so some such t than that the their theirs them themselves then
there these they this those through to too under until up very was we were
what when where which while who whom why will with would you your yours
yourself yourselves
""".split())


def _light_stem(word: str) -> str:
    """Cheap deterministic suffix stripping; first matching rule wins."""
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 5 and word.endswith("ing"):
        return word[:-3]
    if len(word) > 4 and word.endswith("ed"):
        return word[:-2]
    if len(word) > 3 and word.endswith("es"):
        return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    return word


@dataclass(frozen=True)
class PreprocessOptions:
    """Knobs for :func:`build_corpus`; defaults follow common practice for
    topic modelling (10k vocabulary, 50 sentences per document)."""

    max_vocab: int = 10000
    max_sentences: int = 50
    min_token_len: int = 2
    remove_stopwords: bool = True
    stem: bool = False
    doc_bow_capped: bool = False
    extra_stopwords: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.max_vocab < 1:
            raise ConfigError(f"max_vocab must be positive, got {self.max_vocab}")
        if self.max_sentences < 1:
            raise ConfigError(f"max_sentences must be positive, got {self.max_sentences}")
        if self.min_token_len < 1:
            raise ConfigError(f"min_token_len must be positive, got {self.min_token_len}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["extra_stopwords"] = list(self.extra_stopwords)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessOptions":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown preprocess options: {sorted(unknown)}")
        d = dict(d)
        if "extra_stopwords" in d:
            d["extra_stopwords"] = tuple(d["extra_stopwords"])
        return cls(**d)


@dataclass
class Vocabulary:
    """Word/index bijection plus the build-time corpus frequencies."""

    words: list[str]
    frequency: list[int]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if len(self.words) != len(self.frequency):
            raise DataError("vocabulary words and frequencies differ in length")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise DataError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def id_of(self, word: str) -> int | None:
        return self.index.get(word)

    @classmethod
    def from_counts(cls, counts: Counter, max_vocab: int) -> "Vocabulary":
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_vocab]
        return cls([w for w, _ in ranked], [c for _, c in ranked])


@dataclass
class BowCorpus:
    """Bag-of-words corpus: documents, their sentences, and bookkeeping.

    Count vectors are stored sparsely as ``{word_index: count}``.  The
    in-vocabulary token sequence of each document is kept for co-occurrence
    statistics, the segmented raw sentence strings (aligned one-to-one with
    the sentence count rows) for anything downstream that needs the
    original text.
    """

    vocab: Vocabulary
    doc_ids: list[str]
    doc_counts: list[dict[int, int]]
    sent_counts: list[list[dict[int, int]]]
    token_streams: list[list[int]]
    raw_sentences: list[list[str]]
    splits: list[str]
    options: PreprocessOptions

    @property
    def num_docs(self) -> int:
        return len(self.doc_counts)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def doc_lengths(self) -> list[int]:
        return [sum(c.values()) for c in self.doc_counts]

    @property
    def sentences_per_doc(self) -> list[int]:
        return [len(s) for s in self.sent_counts]

    @property
    def total_sentences(self) -> int:
        return sum(self.sentences_per_doc)

    def sentence_offsets(self) -> list[int]:
        """Cumulative sentence start offsets; entry ``i`` is the global row
        index of document ``i``'s first sentence, last entry is the total."""
        offsets = [0]
        for j in self.sentences_per_doc:
            offsets.append(offsets[-1] + j)
        return offsets

    def split_indices(self, name: str) -> list[int]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}")
        return [i for i, s in enumerate(self.splits) if s == name]

    def doc_matrix(self, indices: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(indices), self.vocab_size))
        for row, i in enumerate(indices):
            for v, c in self.doc_counts[i].items():
                out[row, v] = c
        return out

    def sent_matrix(self, i: int) -> np.ndarray:
        sents = self.sent_counts[i]
        out = np.zeros((len(sents), self.vocab_size))
        for row, counts in enumerate(sents):
            for v, c in counts.items():
                out[row, v] = c
        return out

    def summary(self) -> dict:
        lengths = self.doc_lengths
        return {
            "num_docs": self.num_docs,
            "vocab_size": self.vocab_size,
            "total_sentences": self.total_sentences,
            "avg_doc_length": float(np.mean(lengths)) if lengths else 0.0,
            "split_sizes": {s: len(self.split_indices(s)) for s in SPLITS},
        }

    def validate(self) -> None:
        n = self.num_docs
        if n == 0:
            raise DataError("corpus holds no documents")
        same_length = all(
            len(x) == n
            for x in (self.doc_ids, self.sent_counts, self.token_streams,
                      self.raw_sentences, self.splits)
        )
        if not same_length:
            raise DataError("corpus per-document lists are misaligned")
        v = self.vocab_size
        for i in range(n):
            if self.splits[i] not in SPLITS and self.splits[i] != "unassigned":
                raise DataError(f"document {i} has invalid split {self.splits[i]!r}")
            if not self.doc_counts[i]:
                raise DataError(f"document {i} has an empty bag of words")
            if not self.sent_counts[i]:
                raise DataError(f"document {i} has no sentences")
            if len(self.sent_counts[i]) != len(self.raw_sentences[i]):
                raise DataError(f"document {i}: sentence rows and raw sentences misaligned")
            for counts in [self.doc_counts[i], *self.sent_counts[i]]:
                if not counts:
                    raise DataError(f"document {i} has an empty sentence row")
                for w, c in counts.items():
                    if not (0 <= w < v):
                        raise DataError(f"document {i}: word index {w} out of range")
                    if c <= 0:
                        raise DataError(f"document {i}: non-positive count {c}")
            for w in self.token_streams[i]:
                if not (0 <= w < v):
                    raise DataError(f"document {i}: stream index {w} out of range")
            if self.options.doc_bow_capped:
                summed: Counter = Counter()
                for counts in self.sent_counts[i]:
                    summed.update(counts)
                if dict(summed) != self.doc_counts[i]:
                    raise DataError(
                        f"document {i}: bag of words is not the sum of its sentences"
                    )


def _segment(text: str) -> list[str]:
    parts = _SENTENCE_BOUNDARY.split(text.strip())
    return [p.strip() for p in parts if p.strip()]


def _tokenize(sentence: str, opts: PreprocessOptions, stop: frozenset) -> list[str]:
    toks = _TOKEN.findall(sentence.lower())
    if opts.stem:
        toks = [_light_stem(t) for t in toks]
    return [
        t for t in toks
        if len(t) >= opts.min_token_len and (not opts.remove_stopwords or t not in stop)
    ]


def build_corpus(
    raw_docs: Sequence[str],
    opts: PreprocessOptions = PreprocessOptions(),
    doc_ids: Sequence[str] | None = None,
) -> BowCorpus:
    """Preprocess raw document strings into a :class:`BowCorpus`.

    Documents that end up with no in-vocabulary content are dropped;
    their ids simply do not appear.  Raises :class:`DataError` when no
    document survives.
    """
    opts.validate()
    if not raw_docs:
        raise DataError("build_corpus: no documents given")
    if doc_ids is not None and len(doc_ids) != len(raw_docs):
        raise DataError("build_corpus: doc_ids length does not match documents")

    stop = STOPWORDS | set(opts.extra_stopwords) if opts.remove_stopwords else frozenset()

    tokenized: list[tuple[list[list[str]], list[str]]] = []
    freq: Counter = Counter()
    for text in raw_docs:
        sents = _segment(text)
        toks = [_tokenize(s, opts, stop) for s in sents]
        kept = [(t, s) for t, s in zip(toks, sents) if t]
        toks = [t for t, _ in kept]
        sents = [s for _, s in kept]
        tokenized.append((toks, sents))
        counted = toks[: opts.max_sentences] if opts.doc_bow_capped else toks
        for t in counted:
            freq.update(t)

    if not freq:
        raise DataError("build_corpus: no tokens survive preprocessing")
    vocab = Vocabulary.from_counts(freq, opts.max_vocab)

    corpus = BowCorpus(
        vocab=vocab,
        doc_ids=[],
        doc_counts=[],
        sent_counts=[],
        token_streams=[],
        raw_sentences=[],
        splits=[],
        options=opts,
    )
    for pos, (toks, sents) in enumerate(tokenized):
        ids_per_sent = []
        raws = []
        for t, s in zip(toks, sents):
            ids = [vocab.index[w] for w in t if w in vocab.index]
            if ids:
                ids_per_sent.append(ids)
                raws.append(s)
        retained = ids_per_sent[: opts.max_sentences]
        raws = raws[: opts.max_sentences]
        stream_sents = retained if opts.doc_bow_capped else ids_per_sent
        stream = [w for ids in stream_sents for w in ids]
        if not retained or not stream:
            continue  # nothing in vocabulary: drop the document
        corpus.doc_ids.append(doc_ids[pos] if doc_ids is not None else f"d{pos:06d}")
        corpus.doc_counts.append(dict(Counter(stream)))
        corpus.sent_counts.append([dict(Counter(ids)) for ids in retained])
        corpus.token_streams.append(stream)
        corpus.raw_sentences.append(raws)
        corpus.splits.append("unassigned")

    if corpus.num_docs == 0:
        raise DataError("build_corpus: every document was dropped by preprocessing")
    corpus.validate()
    return corpus


def split_corpus(
    corpus: BowCorpus,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> BowCorpus:
    """Assign train/valid/test labels by seeded permutation.

    Boundaries are rounded cumulative ratios, so the sizes are as close to
    ``ratios`` as integer counts allow.  Each ratio must be positive and
    each resulting split non-empty.
    """
    if len(ratios) != 3:
        raise ConfigError(f"need three split ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise ConfigError(f"split ratios must all be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    n = corpus.num_docs
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_valid = int(round(n * (ratios[0] + ratios[1]))) - n_train
    n_test = n - n_train - n_valid
    if min(n_train, n_valid, n_test) < 1:
        raise DataError(
            f"corpus of {n} documents cannot be split {ratios} without an empty part"
        )
    for k, i in enumerate(perm):
        if k < n_train:
            corpus.splits[i] = "train"
        elif k < n_train + n_valid:
            corpus.splits[i] = "valid"
        else:
            corpus.splits[i] = "test"
    return corpus


def _counts_to_pairs(counts: dict[int, int]) -> list[list[int]]:
    return [[int(k), int(v)] for k, v in sorted(counts.items())]


def _pairs_to_counts(pairs: Iterable, where: str) -> dict[int, int]:
    out: dict[int, int] = {}
    for pair in pairs:
        if not isinstance(pair, list) or len(pair) != 2:
            raise DataError(f"{where}: malformed index/count pair {pair!r}")
        k, v = pair
        if k in out:
            raise DataError(f"{where}: duplicate word index {k}")
        out[int(k)] = int(v)
    return out


def save_corpus(corpus: BowCorpus, out_dir: str | Path) -> None:
    corpus.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.txt").write_text("\n".join(corpus.vocab.words) + "\n", encoding="utf-8")
    with (out / "docs.jsonl").open("w", encoding="utf-8") as fh:
        for i in range(corpus.num_docs):
            record = {
                "id": corpus.doc_ids[i],
                "split": corpus.splits[i],
                "n": sum(corpus.doc_counts[i].values()),
                "counts": _counts_to_pairs(corpus.doc_counts[i]),
                "sentences": [_counts_to_pairs(c) for c in corpus.sent_counts[i]],
                "tokens": corpus.token_streams[i],
                "raw_sentences": corpus.raw_sentences[i],
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
    meta = {
        "format_version": FORMAT_VERSION,
        "vocab_size": corpus.vocab_size,
        "num_docs": corpus.num_docs,
        "total_sentences": corpus.total_sentences,
        "frequencies": corpus.vocab.frequency,
        "options": corpus.options.to_dict(),
        "summary": corpus.summary(),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def load_corpus(in_dir: str | Path) -> BowCorpus:
    src = Path(in_dir)
    for name in ("vocab.txt", "docs.jsonl", "meta.json"):
        if not (src / name).is_file():
            raise DataError(f"corpus directory {src} is missing {name}")
    try:
        meta = json.loads((src / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"meta.json is not valid JSON: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported corpus format version {meta.get('format_version')!r}")

    words = (src / "vocab.txt").read_text(encoding="utf-8").splitlines()
    words = [w for w in words if w]
    freq = meta.get("frequencies")
    if not isinstance(freq, list) or len(freq) != len(words):
        raise DataError("meta.json frequencies do not match vocab.txt")
    vocab = Vocabulary(words, [int(f) for f in freq])
    if len(vocab) != int(meta.get("vocab_size", -1)):
        raise DataError("meta.json vocab_size disagrees with vocab.txt")

    opts = PreprocessOptions.from_dict(meta.get("options", {}))
    corpus = BowCorpus(
        vocab=vocab,
        doc_ids=[],
        doc_counts=[],
        sent_counts=[],
        token_streams=[],
        raw_sentences=[],
        splits=[],
        options=opts,
    )
    with (src / "docs.jsonl").open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"docs.jsonl line {lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: invalid JSON: {e}") from e
            counts = _pairs_to_counts(rec.get("counts", []), where)
            if sum(counts.values()) != int(rec.get("n", -1)):
                raise DataError(f"{where}: declared length n disagrees with counts")
            corpus.doc_ids.append(str(rec.get("id", f"d{lineno:06d}")))
            corpus.splits.append(str(rec.get("split", "unassigned")))
            corpus.doc_counts.append(counts)
            corpus.sent_counts.append(
                [_pairs_to_counts(p, where) for p in rec.get("sentences", [])]
            )
            corpus.token_streams.append([int(t) for t in rec.get("tokens", [])])
            corpus.raw_sentences.append([str(s) for s in rec.get("raw_sentences", [])])

    if corpus.num_docs != int(meta.get("num_docs", -1)):
        raise DataError("meta.json num_docs disagrees with docs.jsonl")
    try:
        corpus.validate()
    except DataError:
        raise
    return corpus
