"""Perplexity, topic extraction, and coherence scoring.

The NPMI fixtures are tiny corpora whose window statistics were counted
by hand; the expected values below come from evaluating the definition

    npmi(a, b) = log(p_ab / (p_a p_b)) / -log(p_ab),  p_ab floored at 1e-12

on those counts directly, so they are independent of the implementation's
bookkeeping.
"""

import json
import math

import numpy as np
import pytest

import nahtm.evaluate as ev
from nahtm.corpus import PreprocessOptions, build_corpus
from nahtm.errors import ConfigError, DataError
from nahtm.evaluate import (
    combined_word_topics,
    evaluate,
    npmi_internal,
    perplexity,
    plot_history_svg,
    top_words,
)
from nahtm.model import HyperParams, init_params
from util import internal_hyper, micro_corpus, micro_setup

RAW = PreprocessOptions(remove_stopwords=False, min_token_len=1)


def raw_corpus(texts):
    return build_corpus(texts, RAW)


class TestPerplexity:
    def _uniform_model(self, corpus):
        # zero topic matrix makes every decoder row exactly uniform, no
        # matter what the encoders produce
        hp = internal_hyper(3, 5)
        params = init_params(corpus.vocab_size, None, corpus.total_sentences, hp, seed=0)
        params.word_topic.data[:] = 0.0
        return params, hp

    def test_uniform_model_scores_vocab_size(self):
        corpus = micro_corpus(seed=4, n_docs=10, vocab_size=23)
        params, hp = self._uniform_model(corpus)
        for split in ("train", "valid", "test"):
            for level in ("document", "sentence"):
                ppl = perplexity(corpus, split, params, hp, None, level)
                assert abs(ppl - corpus.vocab_size) < 1e-9

    def test_trained_shapes_are_finite_and_positive(self):
        corpus, emb = micro_setup(seed=4, n_docs=10, vocab_size=23, m=4)
        hp = HyperParams(k=3, l=5, gamma1=0.1, gamma2=0.1, gamma3=0.1)
        params = init_params(corpus.vocab_size, emb.m, corpus.total_sentences, hp, seed=1)
        for level in ("document", "sentence"):
            ppl = perplexity(corpus, "test", params, hp, emb, level)
            assert np.isfinite(ppl) and ppl > 1.0

    def test_chunking_does_not_change_the_score(self, monkeypatch):
        corpus, _ = micro_setup(seed=4, n_docs=10, vocab_size=23, m=4)
        hp = internal_hyper(3, 5)
        params = init_params(corpus.vocab_size, None, corpus.total_sentences, hp, seed=1)
        whole = perplexity(corpus, "train", params, hp, None)
        monkeypatch.setattr(ev, "EVAL_CHUNK", 2)
        chunked = perplexity(corpus, "train", params, hp, None)
        assert math.isclose(whole, chunked, rel_tol=1e-12)

    def test_bad_level_rejected(self):
        corpus = micro_corpus(seed=4)
        params, hp = self._uniform_model(corpus)
        with pytest.raises(ConfigError, match="level"):
            perplexity(corpus, "train", params, hp, None, level="word")

    def test_empty_split_rejected(self):
        corpus = micro_corpus(seed=4, split=False)
        params, hp = self._uniform_model(corpus)
        with pytest.raises(DataError, match="no documents"):
            perplexity(corpus, "train", params, hp, None)


class TestTopWords:
    def test_hand_matrix(self):
        corpus = raw_corpus(["bb cc. aa cc."])  # vocab: cc, aa, bb
        phi = np.array([
            [0.9, 0.5],
            [0.5, 0.0],
            [0.2, 1.0],
        ])
        words, scores = top_words(phi, corpus.vocab, n=2)
        assert words == [["cc", "aa"], ["bb", "cc"]]
        assert scores[0] == [0.9, 0.5]
        assert scores[1] == [1.0, 0.5]

    def test_ties_break_toward_lower_word_index(self):
        corpus = raw_corpus(["bb cc. aa cc."])
        phi = np.full((3, 1), 0.25)
        words, _ = top_words(phi, corpus.vocab, n=3)
        assert words == [["cc", "aa", "bb"]]

    def test_n_larger_than_vocab_returns_all(self):
        corpus = raw_corpus(["bb cc. aa cc."])
        words, _ = top_words(np.eye(3), corpus.vocab, n=10)
        assert all(len(w) == 3 for w in words)

    def test_rejects_nonpositive_n(self):
        corpus = raw_corpus(["bb cc."])
        with pytest.raises(ConfigError):
            top_words(np.ones((2, 1)), corpus.vocab, n=0)

    def test_combined_topics_without_external_is_phi(self):
        corpus = micro_corpus(seed=4, n_docs=6, vocab_size=15)
        hp = internal_hyper(2, 4)
        params = init_params(corpus.vocab_size, None, corpus.total_sentences, hp, seed=0)
        phi = combined_word_topics(params, hp, None)
        assert np.array_equal(phi, params.word_topic.data)
        phi[0, 0] += 1.0  # the copy must not alias model memory
        assert phi[0, 0] != params.word_topic.data[0, 0]

    def test_combined_topics_with_external_shift(self):
        corpus, emb = micro_setup(seed=4, n_docs=6, vocab_size=15, m=4)
        hp = HyperParams(k=2, l=4, gamma1=0.5)
        params = init_params(corpus.vocab_size, emb.m, corpus.total_sentences, hp, seed=0)
        phi = combined_word_topics(params, hp, emb)
        assert not np.array_equal(phi, params.word_topic.data)
        with pytest.raises(ConfigError, match="embeddings"):
            combined_word_topics(params, hp, None)


class TestNpmi:
    def test_perfect_cooccurrence_scores_one(self):
        ref = raw_corpus(["a b."])
        per_topic, mean, cov = npmi_internal([["a", "b"]], ref, split=None)
        assert per_topic == [1.0]
        assert mean == 1.0
        assert cov == {"pairs_total": 1, "pairs_scored": 1,
                       "words_missing": [], "windows": 1}

    def test_disjoint_words_score_near_minus_one(self):
        # two one-window docs; a and b each hit one window, never together:
        # log(1e-12 / 0.25) / -log(1e-12) = -0.949828334056003
        ref = raw_corpus(["a a a.", "b b b."])
        per_topic, mean, _ = npmi_internal([["a", "b"]], ref, split=None)
        assert abs(per_topic[0] - (-0.949828334056003)) < 1e-12
        assert mean == per_topic[0]

    def test_independent_words_score_near_zero(self):
        # 4 windows, p_a = p_b = 1/2, p_ab = 1/4 = p_a p_b exactly
        ref = raw_corpus(["a b.", "a.", "b.", "c."])
        per_topic, _, _ = npmi_internal([["a", "b"]], ref, split=None)
        assert abs(per_topic[0]) < 1e-9

    def test_sliding_windows_hand_counts(self):
        # stream [a, b, c, a] with width 2 gives windows ab, bc, ca:
        # every word in 2 of 3 windows, every pair in 1, so each pair is
        # log((1/3)/(4/9)) / -log(1/3) = -0.261859507140899
        ref = raw_corpus(["a b c a."])
        per_topic, mean, cov = npmi_internal([["a", "b", "c"]], ref,
                                             split=None, window=2)
        assert cov["windows"] == 3
        assert cov["pairs_scored"] == 3
        assert abs(per_topic[0] - (-0.261859507140899)) < 1e-12

    def test_short_document_is_one_window(self):
        ref = raw_corpus(["a b c."])
        _, _, cov = npmi_internal([["a", "b"]], ref, split=None, window=10)
        assert cov["windows"] == 1

    def test_self_pair_counts_as_coherent(self):
        ref = raw_corpus(["a b."])
        per_topic, _, _ = npmi_internal([["a", "a"]], ref, split=None)
        assert per_topic == [1.0]

    def test_unknown_words_skipped_and_reported(self):
        ref = raw_corpus(["a b."])
        per_topic, mean, cov = npmi_internal([["a", "zzz"]], ref, split=None)
        assert per_topic == [None]
        assert mean is None
        assert cov["pairs_scored"] == 0
        assert cov["words_missing"] == ["zzz"]

    def test_word_absent_from_split_is_reported(self):
        ref = raw_corpus(["a b.", "c b."])
        ref.splits[0] = "train"
        ref.splits[1] = "valid"
        per_topic, _, cov = npmi_internal([["a", "c"]], ref, split="train")
        assert per_topic == [None]
        assert "c" in cov["words_missing"]

    def test_mean_skips_unscorable_topics(self):
        ref = raw_corpus(["a b."])
        per_topic, mean, _ = npmi_internal([["a", "b"], ["zzz", "yyy"]],
                                           ref, split=None)
        assert per_topic == [1.0, None]
        assert mean == 1.0

    def test_clamped_to_unit_interval(self):
        ref = raw_corpus(["a a a.", "b b b.", "a b."] * 3)
        per_topic, _, _ = npmi_internal([["a", "b"]], ref, split=None)
        assert -1.0 <= per_topic[0] <= 1.0

    def test_empty_reference_split_rejected(self):
        ref = raw_corpus(["a b."])
        with pytest.raises(DataError):
            npmi_internal([["a", "b"]], ref, split="train")


class TestEvaluateBundle:
    def _fit_free_setup(self):
        corpus, emb = micro_setup(seed=4, n_docs=12, vocab_size=18, m=4)
        hp = HyperParams(k=3, l=5, gamma1=0.1, gamma2=0.1, gamma3=0.1)
        params = init_params(corpus.vocab_size, emb.m, corpus.total_sentences, hp, seed=7)
        return corpus, emb, hp, params

    def test_fixed_key_set(self):
        corpus, emb, hp, params = self._fit_free_setup()
        metrics = evaluate(params, hp, corpus, emb, top_n=4)
        assert set(metrics) == {
            "doc_perplexity", "sent_perplexity", "topics", "npmi_mean",
            "npmi_coverage", "external_npmi_mean", "external_npmi_coverage",
        }
        assert metrics["external_npmi_mean"] is None
        assert metrics["external_npmi_coverage"] is None
        assert len(metrics["topics"]) == hp.k
        for rec in metrics["topics"]:
            assert set(rec) == {"words", "scores", "npmi"}
            assert len(rec["words"]) == 4

    def test_external_reference_fills_external_fields(self):
        corpus, emb, hp, params = self._fit_free_setup()
        reference = micro_corpus(seed=11, n_docs=10, vocab_size=18, split=False)
        metrics = evaluate(params, hp, corpus, emb, reference=reference, top_n=4)
        assert metrics["external_npmi_mean"] is not None
        assert metrics["external_npmi_coverage"]["windows"] > 0
        assert all("external_npmi" in rec for rec in metrics["topics"])

    def test_json_serializable(self):
        corpus, emb, hp, params = self._fit_free_setup()
        metrics = evaluate(params, hp, corpus, emb, top_n=3)
        text = json.dumps(metrics)
        assert json.loads(text)["doc_perplexity"] == metrics["doc_perplexity"]


class TestHistoryPlot:
    def test_writes_svg_with_curve_and_labels(self, tmp_path):
        history = [
            {"epoch": e, "valid_perplexity": 40.0 - e + (e == 4) * 3}
            for e in range(1, 6)
        ]
        out = tmp_path / "history.svg"
        plot_history_svg(history, out)
        text = out.read_text()
        assert text.startswith("<svg")
        assert "<polyline" in text
        assert "validation perplexity" in text and "epoch" in text

    def test_flat_curve_does_not_divide_by_zero(self, tmp_path):
        history = [{"epoch": e, "valid_perplexity": 10.0} for e in (1, 2)]
        out = tmp_path / "flat.svg"
        plot_history_svg(history, out)
        assert out.read_text().startswith("<svg")

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(DataError):
            plot_history_svg([], tmp_path / "x.svg")
