"""Embedding back ends behind one small interface.

``encode_words`` maps vocabulary words through a static subword table:
the mean of the word's piece vectors, with words that yield no pieces
at all reported back so the caller can log them and export zeros.
``encode_sentences`` mean-pools over raw, unpreprocessed text.

The default back end needs no downloaded weights: each character
trigram of a lowercased letter run gets a fixed pseudo-random unit
vector seeded from a stable digest of the piece itself, so any process
on any platform produces the same rows. Pretrained transformer
checkpoints plug in through the same two methods when the transformers
package is installed.
"""

from __future__ import annotations

import hashlib
import re
from collections.abc import Sequence

import numpy as np

from nahtm.errors import DataError

HASH_MODEL = "hash-v1"
_HASH_ID = re.compile(r"^hash-v1(?:-(\d+))?$")
_LETTER_RUNS = re.compile(r"[a-z]+")


def subword_pieces(text: str) -> list[str]:
    """Character trigrams of each lowercased letter run, framed with
    ``<`` and ``>`` so run boundaries are part of the piece. Text
    without any letters has no pieces."""
    pieces: list[str] = []
    for run in _LETTER_RUNS.findall(text.lower()):
        framed = f"<{run}>"
        pieces.extend(framed[i:i + 3] for i in range(len(framed) - 2))
    return pieces


class HashEncoder:
    """Deterministic stand-in for a contextual model (id ``hash-v1``,
    or ``hash-v1-<width>`` to pick the embedding width)."""

    def __init__(self, m: int = 32, model_id: str = HASH_MODEL):
        if m < 1:
            raise DataError(f"embedding width must be positive, got {m}")
        self.m = m
        self.model_id = model_id
        self._pieces: dict[str, np.ndarray] = {}

    def _piece_vector(self, piece: str) -> np.ndarray:
        vec = self._pieces.get(piece)
        if vec is None:
            digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8).digest()
            raw = np.random.default_rng(int.from_bytes(digest, "little")).standard_normal(self.m)
            vec = raw / np.linalg.norm(raw)
            self._pieces[piece] = vec
        return vec

    def _pool(self, text: str) -> np.ndarray | None:
        pieces = subword_pieces(text)
        if not pieces:
            return None
        return np.mean([self._piece_vector(p) for p in pieces], axis=0)

    def encode_words(self, words: Sequence[str]) -> tuple[np.ndarray, list[str]]:
        out = np.zeros((len(words), self.m))
        missing = []
        for i, word in enumerate(words):
            pooled = self._pool(word)
            if pooled is None:
                missing.append(word)  # row stays zero
            else:
                out[i] = pooled
        return out, missing

    def encode_sentences(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.m))
        for i, text in enumerate(texts):
            pooled = self._pool(text)
            if pooled is not None:
                out[i] = pooled
        return out


class TransformerEncoder:
    """Pretrained checkpoint wrapper; needs transformers and torch.

    Word vectors come from the model's static input-embedding table
    (mean over the word's subword ids, unknown-token ids dropped);
    sentence vectors are attention-mask-weighted means of the last
    hidden layer in inference mode.
    """

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import AutoModel, AutoTokenizer
        except ImportError as e:
            raise DataError(
                f"model {model_id!r} needs the transformers package; "
                f"only {HASH_MODEL!r} runs without it"
            ) from e
        try:
            self._tokenizer = AutoTokenizer.from_pretrained(model_id)
            self._model = AutoModel.from_pretrained(model_id)
        except Exception as e:
            raise DataError(f"cannot load model {model_id!r}: {e}") from e
        self._torch = torch
        self._model.eval()  # no dropout: rows must be deterministic
        self.model_id = model_id
        self.m = int(self._model.config.hidden_size)

    def encode_words(self, words: Sequence[str]) -> tuple[np.ndarray, list[str]]:
        table = self._model.get_input_embeddings().weight.detach().cpu().numpy()
        unk = self._tokenizer.unk_token_id
        out = np.zeros((len(words), self.m))
        missing = []
        for i, word in enumerate(words):
            ids = [j for j in self._tokenizer(word, add_special_tokens=False)["input_ids"]
                   if j != unk]
            if ids:
                out[i] = table[ids].mean(axis=0)
            else:
                missing.append(word)
        return out.astype(np.float64), missing

    def encode_sentences(self, texts: Sequence[str]) -> np.ndarray:
        enc = self._tokenizer(list(texts), padding=True, truncation=True,
                              return_tensors="pt")
        with self._torch.no_grad():
            hidden = self._model(**enc).last_hidden_state
        mask = enc["attention_mask"].unsqueeze(-1)
        pooled = (hidden * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
        return pooled.cpu().numpy().astype(np.float64)


def load_encoder(model_id: str):
    """``hash-v1`` or ``hash-v1-<width>`` for the offline back end, any
    other id is treated as a transformers checkpoint name."""
    matched = _HASH_ID.match(model_id)
    if matched:
        return HashEncoder(m=int(matched.group(1) or 32), model_id=model_id)
    return TransformerEncoder(model_id)
