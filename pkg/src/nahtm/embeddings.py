"""External embedding storage: word, sentence, and document vectors.

Embeddings live in a directory of raw float64 little-endian row-major
blobs next to a JSON header describing shapes::

    header.json      m, vocab_size, sentences per document, provenance
    words.bin        vocab_size x m
    sentences.bin    total_sentences x m
    docs.bin         num_docs x m (optional; can be derived as the mean)

Sentence rows are stored in corpus order: document 0's sentences first.
The package never produces embeddings from text itself; it either loads
a directory someone else exported or synthesizes deterministic
pseudo-random vectors for experiments without a real embedder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BowCorpus
from .errors import DataError

__all__ = [
    "EmbeddingSet",
    "derive_doc_embeddings_mean",
    "load_embeddings",
    "save_embeddings",
    "synth_embeddings",
]

FORMAT_VERSION = 1


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


@dataclass
class EmbeddingSet:
    """Word/sentence/document vectors aligned with one corpus."""

    m: int
    words: np.ndarray
    sentences: np.ndarray
    sentences_per_doc: list[int]
    docs: np.ndarray | None = None
    provenance: str = ""
    _offsets: list[int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._offsets = [0]
        for j in self.sentences_per_doc:
            self._offsets.append(self._offsets[-1] + int(j))

    @property
    def vocab_size(self) -> int:
        return self.words.shape[0]

    @property
    def num_docs(self) -> int:
        return len(self.sentences_per_doc)

    @property
    def total_sentences(self) -> int:
        return self._offsets[-1]

    def sent_rows(self, i: int) -> np.ndarray:
        """Sentence embedding block of document ``i``."""
        if not (0 <= i < self.num_docs):
            raise DataError(f"document index {i} out of range")
        return self.sentences[self._offsets[i]:self._offsets[i + 1]]

    def validate(self, corpus: BowCorpus | None = None) -> None:
        if self.m < 1:
            raise DataError(f"embedding width must be positive, got {self.m}")
        for name, arr, rows in (
            ("words", self.words, self.vocab_size),
            ("sentences", self.sentences, self.total_sentences),
        ):
            if arr.ndim != 2 or arr.shape != (rows, self.m):
                raise DataError(f"{name} embeddings have shape {arr.shape}, want ({rows}, {self.m})")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} embeddings hold non-finite values")
        if self.docs is not None:
            if self.docs.shape != (self.num_docs, self.m):
                raise DataError(
                    f"doc embeddings have shape {self.docs.shape}, want ({self.num_docs}, {self.m})"
                )
            if not np.all(np.isfinite(self.docs)):
                raise DataError("doc embeddings hold non-finite values")
        if any(j < 1 for j in self.sentences_per_doc):
            raise DataError("every document needs at least one sentence embedding")
        if corpus is not None:
            if self.vocab_size != corpus.vocab_size:
                raise DataError(
                    f"embeddings cover {self.vocab_size} words, corpus has {corpus.vocab_size}"
                )
            if self.sentences_per_doc != corpus.sentences_per_doc:
                raise DataError("sentence embedding layout does not match the corpus")


def derive_doc_embeddings_mean(embeddings: EmbeddingSet) -> np.ndarray:
    """Document vectors as the unweighted mean of each document's sentences."""
    out = np.empty((embeddings.num_docs, embeddings.m))
    for i in range(embeddings.num_docs):
        out[i] = embeddings.sent_rows(i).mean(axis=0)
    return out


def synth_embeddings(corpus: BowCorpus, m: int, seed: int) -> EmbeddingSet:
    """Deterministic stand-in embeddings derived from the corpus alone.

    Word vectors are seeded unit Gaussians; a sentence vector is the
    count-weighted mean of its word vectors, a document vector the mean of
    its sentence vectors, each row normalized to unit length.
    """
    if m < 1:
        raise DataError(f"embedding width must be positive, got {m}")
    rng = np.random.default_rng(seed)
    words = _unit_rows(rng.standard_normal((corpus.vocab_size, m)))
    sent_blocks = []
    for i in range(corpus.num_docs):
        counts = corpus.sent_matrix(i)
        totals = counts.sum(axis=1, keepdims=True)
        sent_blocks.append(_unit_rows((counts @ words) / totals))
    sentences = np.concatenate(sent_blocks, axis=0)
    es = EmbeddingSet(
        m=m,
        words=words,
        sentences=sentences,
        sentences_per_doc=list(corpus.sentences_per_doc),
        provenance=f"synth(m={m}, seed={seed})",
    )
    es.docs = _unit_rows(derive_doc_embeddings_mean(es))
    es.validate(corpus)
    return es


def save_embeddings(embeddings: EmbeddingSet, out_dir: str | Path) -> None:
    embeddings.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": FORMAT_VERSION,
        "m": embeddings.m,
        "vocab_size": embeddings.vocab_size,
        "num_docs": embeddings.num_docs,
        "sentences_per_doc": embeddings.sentences_per_doc,
        "has_docs": embeddings.docs is not None,
        "provenance": embeddings.provenance,
    }
    (out / "header.json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    (out / "words.bin").write_bytes(np.ascontiguousarray(embeddings.words, dtype="<f8").tobytes())
    (out / "sentences.bin").write_bytes(
        np.ascontiguousarray(embeddings.sentences, dtype="<f8").tobytes()
    )
    if embeddings.docs is not None:
        (out / "docs.bin").write_bytes(np.ascontiguousarray(embeddings.docs, dtype="<f8").tobytes())


def _read_matrix(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"embedding directory is missing {path.name}")
    raw = path.read_bytes()
    want = rows * cols * 8
    if len(raw) != want:
        raise DataError(f"{path.name} holds {len(raw)} bytes, header implies {want}")
    return np.frombuffer(raw, dtype="<f8").reshape(rows, cols).astype(np.float64)


def load_embeddings(in_dir: str | Path, corpus: BowCorpus | None = None) -> EmbeddingSet:
    """Read an embedding directory, optionally checking corpus alignment."""
    src = Path(in_dir)
    header_path = src / "header.json"
    if not header_path.is_file():
        raise DataError(f"embedding directory {src} is missing header.json")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"header.json is not valid JSON: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported embedding format version {header.get('format_version')!r}")
    try:
        m = int(header["m"])
        v = int(header["vocab_size"])
        per_doc = [int(j) for j in header["sentences_per_doc"]]
        has_docs = bool(header.get("has_docs", False))
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"header.json is missing or malforms required fields: {e}") from e
    total = sum(per_doc)
    es = EmbeddingSet(
        m=m,
        words=_read_matrix(src / "words.bin", v, m),
        sentences=_read_matrix(src / "sentences.bin", total, m),
        sentences_per_doc=per_doc,
        docs=_read_matrix(src / "docs.bin", len(per_doc), m) if has_docs else None,
        provenance=str(header.get("provenance", "")),
    )
    es.validate(corpus)
    return es
