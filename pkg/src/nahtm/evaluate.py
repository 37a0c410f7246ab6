"""Model evaluation: held-out perplexity, topic words, and coherence.

Perplexity follows the usual normalized form

    exp( - mean_i  loglik_i / N_i )

with every latent at its posterior mean (no sampling at evaluation time).
Document level scores each document's bag of words against its own
combined document mixture; sentence level scores each sentence against its
own combined sentence mixture, averaging over all sentences of the split.

Coherence is normalized pointwise mutual information over co-occurrence
windows of the corpus token streams (width 10, stride 1; shorter documents
count as a single window).  Probabilities are window fractions; the joint
gets a tiny additive floor so unseen pairs score close to -1 instead of
blowing up.  Words that fell out of the vocabulary or never occur in the
reference split are skipped and reported in the coverage diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .corpus import BowCorpus
from .embeddings import EmbeddingSet
from .errors import ConfigError, DataError, NumericError
from .model import (
    HyperParams,
    ModelParams,
    decode_log_probs,
    encode_external,
    make_batch,
    run_latents,
)

__all__ = [
    "TopicReport",
    "evaluate",
    "npmi_internal",
    "perplexity",
    "plot_history_svg",
    "top_words",
]

NPMI_EPS = 1e-12
EVAL_CHUNK = 256


def _chunks(seq: Sequence[int], size: int):
    for start in range(0, len(seq), size):
        yield list(seq[start:start + size])


def perplexity(
    corpus: BowCorpus,
    split: str,
    params: ModelParams,
    hyper: HyperParams,
    embeddings: EmbeddingSet | None = None,
    level: str = "document",
) -> float:
    """Held-out perplexity of one split at the posterior means."""
    if level not in ("document", "sentence"):
        raise ConfigError(f"level must be 'document' or 'sentence', got {level!r}")
    idx = corpus.split_indices(split)
    if not idx:
        raise DataError(f"split {split!r} holds no documents")
    ratios: list[np.ndarray] = []
    for chunk in _chunks(idx, EVAL_CHUNK):
        batch = make_batch(corpus, chunk, embeddings)
        lat = run_latents(batch, params, hyper, noise=None)
        if level == "document":
            lp = decode_log_probs(lat.z_comb, lat.phi_comb, params.decoder_bias).data
            counts = batch.doc_counts
        else:
            lp = decode_log_probs(lat.s_comb, lat.phi_comb, params.decoder_bias).data
            counts = batch.sent_counts
        ll = (counts * lp).sum(axis=1)
        n = counts.sum(axis=1)
        ratios.append(ll / n)
    mean_ratio = float(np.concatenate(ratios).mean())
    with np.errstate(over="ignore"):
        value = float(np.exp(-mean_ratio))
    if not np.isfinite(value):
        raise NumericError(
            f"perplexity overflowed on split {split!r} "
            f"(mean per-token log-likelihood {mean_ratio:.3e})"
        )
    return value


def combined_word_topics(
    params: ModelParams, hyper: HyperParams, embeddings: EmbeddingSet | None = None
) -> np.ndarray:
    """The combined word-topic matrix at the posterior mean, shape (V, K)."""
    phi = params.word_topic.data
    if hyper.gamma1 != 0.0:
        if embeddings is None:
            raise ConfigError("gamma1 is nonzero: combined topics need word embeddings")
        ext = encode_external(params, Tensor(embeddings.words)).mean.data
        phi = phi + hyper.gamma1 * ext
    return np.array(phi, copy=True)


def top_words(
    phi: np.ndarray, vocab, n: int = 10
) -> tuple[list[list[str]], list[list[float]]]:
    """Highest-scoring words per topic column; ties break toward the lower
    word index so the result is deterministic."""
    if n < 1:
        raise ConfigError(f"top_words: n must be positive, got {n}")
    words, scores = [], []
    for k in range(phi.shape[1]):
        order = np.argsort(-phi[:, k], kind="stable")[:n]
        words.append([vocab.words[i] for i in order])
        scores.append([float(phi[i, k]) for i in order])
    return words, scores


def _window_counts(
    streams: list[list[int]], relevant: set[int], window: int
) -> tuple[dict[int, int], dict[tuple[int, int], int], int]:
    singles: dict[int, int] = {}
    pairs: dict[tuple[int, int], int] = {}
    total = 0
    for stream in streams:
        if len(stream) <= window:
            spans = [stream] if stream else []
        else:
            spans = [stream[i:i + window] for i in range(len(stream) - window + 1)]
        for span in spans:
            total += 1
            present = sorted({w for w in span if w in relevant})
            for i, a in enumerate(present):
                singles[a] = singles.get(a, 0) + 1
                for b in present[i + 1:]:
                    pairs[(a, b)] = pairs.get((a, b), 0) + 1
    return singles, pairs, total


def npmi_internal(
    topics: list[list[str]],
    reference: BowCorpus,
    split: str | None = "train",
    window: int = 10,
) -> tuple[list[float | None], float | None, dict]:
    """Topic coherence against a reference corpus's co-occurrence windows.

    Returns per-topic mean NPMI over word pairs (``None`` when no pair of
    the topic could be scored), the mean over scorable topics, and a
    coverage diagnostic listing skipped pairs and unknown words.
    """
    if split is None:
        indices = list(range(reference.num_docs))
    else:
        indices = reference.split_indices(split)
        if not indices:
            raise DataError(f"reference split {split!r} holds no documents")
    streams = [reference.token_streams[i] for i in indices]

    ids: dict[str, int | None] = {}
    for topic in topics:
        for w in topic:
            if w not in ids:
                ids[w] = reference.vocab.id_of(w)
    relevant = {i for i in ids.values() if i is not None}
    singles, pairs, total = _window_counts(streams, relevant, window)
    if total == 0:
        raise DataError("reference corpus has no token windows")

    per_topic: list[float | None] = []
    pairs_total = 0
    pairs_scored = 0
    missing_words = sorted(w for w, i in ids.items() if i is None or singles.get(i, 0) == 0)
    for topic in topics:
        vals = []
        for i in range(len(topic)):
            for j in range(i + 1, len(topic)):
                pairs_total += 1
                a, b = topic[i], topic[j]
                if a == b:
                    vals.append(1.0)  # degenerate self pair: perfectly coherent
                    pairs_scored += 1
                    continue
                ia, ib = ids.get(a), ids.get(b)
                if ia is None or ib is None:
                    continue
                ca, cb = singles.get(ia, 0), singles.get(ib, 0)
                if ca == 0 or cb == 0:
                    continue
                key = (ia, ib) if ia < ib else (ib, ia)
                cab = pairs.get(key, 0)
                if cab == total:
                    vals.append(1.0)
                    pairs_scored += 1
                    continue
                p_a, p_b = ca / total, cb / total
                p_ab = cab / total + NPMI_EPS
                score = math.log(p_ab / (p_a * p_b)) / (-math.log(p_ab))
                vals.append(min(1.0, max(-1.0, score)))
                pairs_scored += 1
        per_topic.append(float(np.mean(vals)) if vals else None)
    scored = [x for x in per_topic if x is not None]
    coverage = {
        "pairs_total": pairs_total,
        "pairs_scored": pairs_scored,
        "words_missing": missing_words,
        "windows": total,
    }
    return per_topic, (float(np.mean(scored)) if scored else None), coverage


@dataclass
class TopicReport:
    """Topic words with their scores and coherence."""

    words: list[list[str]]
    scores: list[list[float]]
    npmi: list[float | None]

    def as_records(self) -> list[dict]:
        return [
            {"words": w, "scores": s, "npmi": c}
            for w, s, c in zip(self.words, self.scores, self.npmi)
        ]


def evaluate(
    params: ModelParams,
    hyper: HyperParams,
    corpus: BowCorpus,
    embeddings: EmbeddingSet | None = None,
    reference: BowCorpus | None = None,
    split: str = "test",
    top_n: int = 10,
) -> dict:
    """Full evaluation bundle with a fixed key set.

    Keys: ``doc_perplexity``, ``sent_perplexity``, ``topics`` (list of
    ``{words, scores, npmi}``), ``npmi_mean``, ``npmi_coverage``,
    ``external_npmi_mean``, ``external_npmi_coverage`` (the external pair
    is ``None`` when no reference corpus is given).
    """
    doc_ppl = perplexity(corpus, split, params, hyper, embeddings, "document")
    sent_ppl = perplexity(corpus, split, params, hyper, embeddings, "sentence")
    phi = combined_word_topics(params, hyper, embeddings)
    words, scores = top_words(phi, corpus.vocab, top_n)
    per_topic, mean_npmi, coverage = npmi_internal(words, corpus, split="train")
    report = TopicReport(words, scores, per_topic)
    metrics = {
        "doc_perplexity": doc_ppl,
        "sent_perplexity": sent_ppl,
        "topics": report.as_records(),
        "npmi_mean": mean_npmi,
        "npmi_coverage": coverage,
        "external_npmi_mean": None,
        "external_npmi_coverage": None,
    }
    if reference is not None:
        ext_topic, ext_mean, ext_cov = npmi_internal(words, reference, split=None)
        metrics["external_npmi_mean"] = ext_mean
        metrics["external_npmi_coverage"] = ext_cov
        for rec, val in zip(metrics["topics"], ext_topic):
            rec["external_npmi"] = val
    return metrics


def plot_history_svg(history: list[dict], out_path: str | Path) -> None:
    """Validation-perplexity curve as a small standalone SVG file."""
    if not history:
        raise DataError("history is empty, nothing to plot")
    xs = [float(row["epoch"]) for row in history]
    ys = [float(row["valid_perplexity"]) for row in history]
    w, h, pad = 640, 360, 48
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(x: float) -> float:
        return pad + (x - x_lo) / x_span * (w - 2 * pad)

    def sy(y: float) -> float:
        return h - pad - (y - y_lo) / y_span * (h - 2 * pad)

    points = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
    best = int(np.argmin(ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<polyline points="{points}" fill="none" stroke="#336699" stroke-width="1.5"/>',
        f'<circle cx="{sx(xs[best]):.2f}" cy="{sy(ys[best]):.2f}" r="3.5" fill="#cc3333"/>',
        f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="14" y="{h / 2:.0f}" font-size="12" '
        f'transform="rotate(-90 14 {h / 2:.0f})" text-anchor="middle">validation perplexity</text>',
        f'<text x="{pad}" y="{h - pad + 16}" font-size="10" text-anchor="middle">{x_lo:g}</text>',
        f'<text x="{w - pad}" y="{h - pad + 16}" font-size="10" text-anchor="middle">{x_hi:g}</text>',
        f'<text x="{pad - 4}" y="{sy(y_lo) + 4:.0f}" font-size="10" text-anchor="end">{y_lo:.4g}</text>',
        f'<text x="{pad - 4}" y="{sy(y_hi) + 4:.0f}" font-size="10" text-anchor="end">{y_hi:.4g}</text>',
        "</svg>",
    ]
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")
