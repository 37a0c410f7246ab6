"""Build the embedding store for a corpus and tie it to the corpus bytes.

The store is assembled in a scratch directory next to the target and
moved into place only once every file, manifest included, is on disk,
so the output path never holds a half-written store. The manifest
records which encoder produced the rows and a checksum of the exact
corpus files the export read.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from nahtm.corpus import load_corpus
from nahtm.embeddings import EmbeddingSet, derive_doc_embeddings_mean, save_embeddings
from nahtm.errors import ConfigError, DataError

from .encoder import load_encoder

log = logging.getLogger("embed_export")

CORPUS_FILES = ("vocab.txt", "docs.jsonl", "meta.json")
MANIFEST_NAME = "manifest.json"


def corpus_checksum(corpus_dir: str | Path) -> str:
    """sha256 over the corpus files, names mixed in so renames change it."""
    digest = hashlib.sha256()
    for name in CORPUS_FILES:
        path = Path(corpus_dir) / name
        if not path.is_file():
            raise DataError(f"corpus directory {corpus_dir} is missing {name}")
        digest.update(name.encode("utf-8"))
        digest.update(b"\x00")
        digest.update(path.read_bytes())
        digest.update(b"\x00")
    return digest.hexdigest()


@dataclass
class ExportManifest:
    """What produced a store and what it was produced from."""

    model: str
    m: int
    corpus_checksum: str
    levels: dict[str, bool]
    missing_words: list[str]

    def write(self, store_dir: str | Path) -> None:
        path = Path(store_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")


def read_manifest(store_dir: str | Path) -> ExportManifest:
    path = Path(store_dir) / MANIFEST_NAME
    if not path.is_file():
        raise DataError(f"store {store_dir} has no {MANIFEST_NAME}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{MANIFEST_NAME} is not valid JSON: {e}") from e
    try:
        return ExportManifest(
            model=str(raw["model"]),
            m=int(raw["m"]),
            corpus_checksum=str(raw["corpus_checksum"]),
            levels={str(k): bool(v) for k, v in raw["levels"].items()},
            missing_words=[str(w) for w in raw["missing_words"]],
        )
    except (KeyError, TypeError, AttributeError) as e:
        raise DataError(f"{MANIFEST_NAME} is missing or malforms required fields: {e}") from e


def verify_manifest(store_dir: str | Path, corpus_dir: str | Path) -> ExportManifest:
    """Check the stored checksum against the corpus as it is on disk now."""
    manifest = read_manifest(store_dir)
    actual = corpus_checksum(corpus_dir)
    if actual != manifest.corpus_checksum:
        raise DataError(
            "manifest was built against a different corpus "
            f"(stored {manifest.corpus_checksum[:12]}, found {actual[:12]})"
        )
    return manifest


def export(
    corpus_dir: str | Path,
    model_id: str,
    out_path: str | Path,
    batch: int = 64,
    encoder=None,
) -> ExportManifest:
    """Write the embedding store and manifest for a built corpus.

    ``encoder`` overrides the back end picked from ``model_id``; the
    manifest records whichever encoder actually produced the rows.
    Words without subword pieces are logged and exported as zeros.
    """
    if batch < 1:
        raise ConfigError(f"batch size must be positive, got {batch}")
    corpus = load_corpus(corpus_dir)  # guarantees raw sentences are retained
    checksum = corpus_checksum(corpus_dir)
    if encoder is None:
        encoder = load_encoder(model_id)

    words, missing = encoder.encode_words(corpus.vocab.words)
    for word in missing:
        log.warning("vocabulary word %r has no subword pieces, exporting zeros", word)

    texts = [t for doc in corpus.raw_sentences for t in doc]
    sentences = np.concatenate(
        [encoder.encode_sentences(texts[a:a + batch]) for a in range(0, len(texts), batch)],
        axis=0,
    )

    store = EmbeddingSet(
        m=encoder.m,
        words=words,
        sentences=sentences,
        sentences_per_doc=list(corpus.sentences_per_doc),
        provenance=f"export(model={encoder.model_id}, corpus={checksum[:12]})",
    )
    store.docs = derive_doc_embeddings_mean(store)
    store.validate(corpus)

    manifest = ExportManifest(
        model=encoder.model_id,
        m=encoder.m,
        corpus_checksum=checksum,
        levels={"words": True, "sentences": True, "docs": True},
        missing_words=list(missing),
    )

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.partial.", dir=out.parent))
    try:
        save_embeddings(store, scratch)
        manifest.write(scratch)
        if out.exists():
            shutil.rmtree(out)
        os.replace(scratch, out)
    except Exception:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    return manifest
