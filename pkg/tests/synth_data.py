"""Synthetic corpus with planted topic structure.

Five topics own disjoint 20-word vocabulary blocks.  A topic puts 0.9 of
its mass uniformly on its own block and spreads the remaining 0.1 over
the whole vocabulary, so blocks overlap just enough to be realistic.
Every sentence draws a single topic from its document's mixture and then
draws tokens i.i.d. from that topic, which makes sentence-level structure
something a model can actually exploit.

Embeddings are constructed to correlate with the planted topics: each
topic gets a random unit anchor in R^M, each word sits near its block's
anchor, and sentence/document rows are count-weighted means, matching the
layout the model expects.
"""

from __future__ import annotations

import numpy as np

from nahtm.corpus import BowCorpus, PreprocessOptions, build_corpus, split_corpus
from nahtm.embeddings import EmbeddingSet

from util import word

N_TOPICS = 5
BLOCK = 20
VOCAB = N_TOPICS * BLOCK


def planted_topics() -> np.ndarray:
    """The generating word distributions, shape (VOCAB, N_TOPICS)."""
    phi = np.full((VOCAB, N_TOPICS), 0.1 / VOCAB)
    for t in range(N_TOPICS):
        phi[t * BLOCK:(t + 1) * BLOCK, t] += 0.9 / BLOCK
    return phi


def synth_corpus(
    n_docs: int = 500,
    seed: int = 0,
    mean_sentences: int = 8,
    sentence_len: tuple[int, int] = (6, 12),
) -> BowCorpus:
    rng = np.random.default_rng(seed)
    phi = planted_topics()
    vocab_words = [word(i) for i in range(VOCAB)]
    docs = []
    for _ in range(n_docs):
        mix = rng.dirichlet(np.full(N_TOPICS, 0.3))
        n_sent = max(2, int(rng.poisson(mean_sentences)))
        sents = []
        for _ in range(n_sent):
            topic = int(rng.choice(N_TOPICS, p=mix))
            n_tok = int(rng.integers(sentence_len[0], sentence_len[1] + 1))
            ids = rng.choice(VOCAB, size=n_tok, p=phi[:, topic])
            sents.append(" ".join(vocab_words[i] for i in ids) + ".")
        docs.append(" ".join(sents))
    corpus = build_corpus(docs, PreprocessOptions(remove_stopwords=False))
    split_corpus(corpus, (0.6, 0.2, 0.2), seed=seed)
    return corpus


def original_word_ids(corpus: BowCorpus) -> list[int]:
    """For each corpus vocabulary position, the generating word index.
    The corpus vocabulary is frequency-sorted, so the two orders differ."""
    back = {word(i): i for i in range(VOCAB)}
    return [back[w] for w in corpus.vocab.words]


def planted_in_corpus_order(corpus: BowCorpus) -> np.ndarray:
    """The planted distributions with rows permuted to match the corpus
    vocabulary, shape (vocab_size, N_TOPICS)."""
    return planted_topics()[original_word_ids(corpus)]


def correlated_embeddings(corpus: BowCorpus, m: int = 16, seed: int = 0,
                          noise: float = 0.5) -> EmbeddingSet:
    """Word vectors clustered around per-topic anchors, aggregated upward
    by count-weighted means."""
    rng = np.random.default_rng(seed)
    anchors = rng.standard_normal((N_TOPICS, m))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    words = np.zeros((corpus.vocab_size, m))
    for i, original in enumerate(original_word_ids(corpus)):
        vec = anchors[original // BLOCK] + noise * rng.standard_normal(m)
        words[i] = vec / np.linalg.norm(vec)

    sent_rows = []
    doc_rows = np.zeros((corpus.num_docs, m))
    for i in range(corpus.num_docs):
        block = np.zeros((len(corpus.sent_counts[i]), m))
        for j, counts in enumerate(corpus.sent_counts[i]):
            total = sum(counts.values())
            for v, c in counts.items():
                block[j] += c * words[v]
            block[j] /= total
            norm = np.linalg.norm(block[j])
            if norm > 0:
                block[j] /= norm
        sent_rows.append(block)
        doc_rows[i] = block.mean(axis=0)
    sentences = np.vstack(sent_rows)
    return EmbeddingSet(
        m=m,
        words=words,
        sentences=sentences,
        sentences_per_doc=[len(s) for s in corpus.sent_counts],
        docs=doc_rows,
        provenance=f"planted(m={m}, seed={seed})",
    )


def greedy_match_cosine(recovered: np.ndarray, planted: np.ndarray) -> float:
    """Mean cosine over a greedy one-to-one matching of recovered topic
    columns to planted columns (best pair first, no replacement)."""
    def unit(x):
        n = np.linalg.norm(x, axis=0, keepdims=True)
        n[n == 0] = 1.0
        return x / n

    r = unit(recovered.astype(float))
    p = unit(planted.astype(float))
    sim = r.T @ p  # (K, K*)
    taken_r: set[int] = set()
    taken_p: set[int] = set()
    scores = []
    for _ in range(min(sim.shape)):
        best, best_pair = -np.inf, None
        for a in range(sim.shape[0]):
            if a in taken_r:
                continue
            for b in range(sim.shape[1]):
                if b in taken_p:
                    continue
                if sim[a, b] > best:
                    best, best_pair = sim[a, b], (a, b)
        taken_r.add(best_pair[0])
        taken_p.add(best_pair[1])
        scores.append(best)
    return float(np.mean(scores))
