"""Small deterministic fixtures shared by the test modules."""

from __future__ import annotations

import numpy as np

from nahtm.corpus import BowCorpus, PreprocessOptions, build_corpus, split_corpus
from nahtm.embeddings import EmbeddingSet, synth_embeddings


def word(i: int) -> str:
    """Alphabetic pseudo-word for index ``i``: survives tokenization."""
    return "w" + chr(97 + (i // 26) % 26) + chr(97 + i % 26)


def random_docs(
    rng: np.random.Generator,
    n_docs: int,
    vocab_size: int,
    sentences=(2, 4),
    sentence_len=(3, 6),
) -> list[str]:
    docs = []
    for _ in range(n_docs):
        n_sent = int(rng.integers(sentences[0], sentences[1] + 1))
        parts = []
        for _ in range(n_sent):
            n_tok = int(rng.integers(sentence_len[0], sentence_len[1] + 1))
            toks = [word(int(rng.integers(0, vocab_size))) for _ in range(n_tok)]
            parts.append(" ".join(toks) + ".")
        docs.append(" ".join(parts))
    return docs


def micro_corpus(seed: int = 0, n_docs: int = 8, vocab_size: int = 30,
                 split: bool = True) -> BowCorpus:
    rng = np.random.default_rng(seed)
    corpus = build_corpus(
        random_docs(rng, n_docs, vocab_size),
        PreprocessOptions(remove_stopwords=False),
    )
    if split:
        split_corpus(corpus, (0.5, 0.25, 0.25), seed=seed)
    return corpus


def micro_setup(seed: int = 0, n_docs: int = 8, vocab_size: int = 30,
                m: int = 6) -> tuple[BowCorpus, EmbeddingSet]:
    corpus = micro_corpus(seed=seed, n_docs=n_docs, vocab_size=vocab_size)
    return corpus, synth_embeddings(corpus, m=m, seed=seed + 1)


# all combination weights and the external word KL at zero
_INTERNAL_ONLY = dict(gamma1=0.0, gamma2=0.0, gamma3=0.0, beta2=0.0)


def internal_hyper(k: int, l: int, **kw):
    """HyperParams with the external encoder fully disabled."""
    from nahtm.model import HyperParams

    return HyperParams(k=k, l=l, **{**_INTERNAL_ONLY, **kw})


def internal_config(**kw):
    """TrainConfig with the external encoder fully disabled."""
    from nahtm.trainer import TrainConfig

    return TrainConfig(**{**_INTERNAL_ONLY, **kw})
