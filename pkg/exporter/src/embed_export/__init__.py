"""Embedding export for built corpora.

Words come from a static subword table (mean of piece vectors, zeros
when a word yields no pieces), sentences from mean pooling over the
raw unpreprocessed text, documents from the unweighted mean of their
sentences. Output goes to the exact store format the topic-model
package loads, plus a manifest tying it to the corpus bytes.
"""

from .encoder import HASH_MODEL, HashEncoder, TransformerEncoder, load_encoder, subword_pieces
from .export import (
    CORPUS_FILES,
    MANIFEST_NAME,
    ExportManifest,
    corpus_checksum,
    export,
    read_manifest,
    verify_manifest,
)

__all__ = [
    "HASH_MODEL",
    "HashEncoder",
    "TransformerEncoder",
    "load_encoder",
    "subword_pieces",
    "CORPUS_FILES",
    "MANIFEST_NAME",
    "ExportManifest",
    "corpus_checksum",
    "export",
    "read_manifest",
    "verify_manifest",
]
