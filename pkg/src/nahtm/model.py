"""The topic model: encoders, latent combination, decoder, and objective.

Two variational encoders share one architecture (tanh MLP with linear mean
and clamped log-variance heads).  The internal encoder reads bag-of-words
count rows; the external encoder reads embedding rows and is applied at
three granularities: per word, per sentence, and per document.  The
document-level input is either the unweighted mean of the document's
sentence embeddings or a learned attention average, depending on variant.

Latents stay unnormalized until combination:

    word topics     phi = phi_bow + gamma1 * phi_ext
    sentence rows   sparsemax(s_bow + gamma2 * s_ext)
    document rows   softmax(z_bow + gamma3 * z_ext)

The decoder is shared: log-probabilities are a row-wise log-softmax of
``topics @ phi^T``.  All KL regularizers operate on the unnormalized
posteriors.  ``variant`` picks how sentence posteriors are constrained:

    KL    against the standard normal prior
    HKL   against their own document's posterior
    S1    HKL pairs weighted by normalized learned scores; the scores are
          pulled toward the attention scores by a squared penalty
    S2    like S1 but the targets are negated distances to the document's
          sentence-embedding centroid, computed without parameters

The hard variants of S1/S2 weight the KL pairs by the normalized scores
directly (attention weights for S1, normalized distance scores for S2)
with no auxiliary score vector and no penalty.

Setting every combination weight and ``beta2`` to zero disables the
external encoder entirely: no external computation runs, so the model is
exactly the internal-only baseline, not merely close to it.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import BowCorpus
from .embeddings import EmbeddingSet
from .errors import ConfigError, DataError, ShapeError

__all__ = [
    "Batch",
    "DiagGaussian",
    "EncoderParams",
    "HyperParams",
    "LatentBundle",
    "ModelParams",
    "NoiseBundle",
    "attention_doc_embedding",
    "centroid_distance_weights",
    "combine",
    "decode_log_probs",
    "doc_kl_term",
    "encode_external",
    "encode_internal",
    "init_params",
    "kl_diag_gauss",
    "kl_diag_gauss_rows",
    "kl_standard_rows",
    "load_checkpoint",
    "make_batch",
    "multinomial_loglik",
    "objective",
    "reparam_sample",
    "run_latents",
    "save_checkpoint",
    "sent_kl_term",
    "word_reg_term",
]

CHECKPOINT_VERSION = 1
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
VARIANTS = ("KL", "HKL", "S1", "S2")
NORMALIZERS = ("softmax", "sparsemax")
DOC_EMB_MODES = ("auto", "attention", "mean", "provided")


@dataclass(frozen=True)
class HyperParams:
    """Everything that shapes the objective, validated up front."""

    k: int
    l: int
    gamma1: float = 0.01   # word-topic combination weight
    gamma2: float = 0.001  # sentence combination weight
    gamma3: float = 0.01   # document combination weight
    gamma4: float = 1.0    # sentence likelihood weight in the loss
    beta0: float = 1.0     # document KL strength
    beta1: float = 0.1     # sentence KL strength
    beta2: float = 0.001   # external word posterior KL strength
    lambda0: float = 1.0   # score-matching penalty (soft S1/S2)
    lambda1: float = 0.01  # squared-norm penalty on the word-topic matrix
    variant: str = "HKL"
    attention_normalizer: str = "softmax"
    hard_weights: bool = False
    doc_emb_mode: str = "auto"
    hidden_layers: int = 1
    use_decoder_bias: bool = False
    detach_doc_posterior: bool = False
    detach_penalty_scores: bool = False

    def validate(self) -> None:
        if self.k < 1 or self.l < 1:
            raise ConfigError(f"k and l must be positive, got k={self.k}, l={self.l}")
        if self.hidden_layers < 1:
            raise ConfigError(f"hidden_layers must be positive, got {self.hidden_layers}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.attention_normalizer not in NORMALIZERS:
            raise ConfigError(
                f"attention_normalizer must be one of {NORMALIZERS}, "
                f"got {self.attention_normalizer!r}"
            )
        if self.doc_emb_mode not in DOC_EMB_MODES:
            raise ConfigError(f"doc_emb_mode must be one of {DOC_EMB_MODES}")
        for name in ("gamma1", "gamma2", "gamma3", "gamma4", "beta0", "beta1",
                     "beta2", "lambda0", "lambda1"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @property
    def uses_external_encoder(self) -> bool:
        return any((self.gamma1, self.gamma2, self.gamma3, self.beta2))

    @property
    def needs_embeddings(self) -> bool:
        return self.uses_external_encoder or self.variant in ("S1", "S2")

    def resolved_doc_emb_mode(self) -> str:
        if self.doc_emb_mode != "auto":
            return self.doc_emb_mode
        return "attention" if self.variant == "S1" else "mean"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        hp = cls(**d)
        hp.validate()
        return hp


@dataclass
class DiagGaussian:
    """Row-wise independent Gaussians: one (mean, log-variance) pair per row."""

    mean: Tensor
    log_var: Tensor

    def __post_init__(self) -> None:
        if self.mean.shape != self.log_var.shape:
            raise ShapeError(
                f"mean {self.mean.shape} and log_var {self.log_var.shape} disagree"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def row(self, i: int) -> "DiagGaussian":
        return DiagGaussian(ad.rows(self.mean, i, i + 1), ad.rows(self.log_var, i, i + 1))

    def block(self, a: int, b: int) -> "DiagGaussian":
        return DiagGaussian(ad.rows(self.mean, a, b), ad.rows(self.log_var, a, b))

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_var.detach())


@dataclass
class EncoderParams:
    """Weights of one variational encoder."""

    hidden: list[tuple[Tensor, Tensor]]
    w_mean: Tensor
    b_mean: Tensor
    w_logvar: Tensor
    b_logvar: Tensor

    @property
    def input_width(self) -> int:
        return self.hidden[0][0].shape[0]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(self.hidden):
            out.append((f"{prefix}.h{i}.w", w))
            out.append((f"{prefix}.h{i}.b", b))
        out.extend(
            [
                (f"{prefix}.mean.w", self.w_mean),
                (f"{prefix}.mean.b", self.b_mean),
                (f"{prefix}.logvar.w", self.w_logvar),
                (f"{prefix}.logvar.b", self.b_logvar),
            ]
        )
        return out


@dataclass
class ModelParams:
    """All trainable tensors plus the dimensions they imply."""

    v: int
    k: int
    l: int
    m: int | None
    total_sentences: int
    enc_bow: EncoderParams
    enc_ext: EncoderParams | None
    word_topic: Tensor
    att_w: Tensor | None
    att_b: Tensor | None
    att_v: Tensor | None
    sent_control: Tensor
    decoder_bias: Tensor | None = None

    def named(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in fixed declaration order (checkpoint order)."""
        out = self.enc_bow.named("enc_bow")
        if self.enc_ext is not None:
            out.extend(self.enc_ext.named("enc_ext"))
        out.append(("word_topic", self.word_topic))
        if self.att_w is not None:
            out.extend([("att.w", self.att_w), ("att.b", self.att_b), ("att.v", self.att_v)])
        out.append(("sent_control", self.sent_control))
        if self.decoder_bias is not None:
            out.append(("decoder_bias", self.decoder_bias))
        return out

    def zero_grads(self) -> None:
        for _, t in self.named():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.named():
            t.data[...] = snap[name]


def _glorot(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _init_encoder(rng: np.random.Generator, width_in: int, l: int, k: int,
                  hidden_layers: int) -> EncoderParams:
    hidden = []
    w_in = width_in
    for _ in range(hidden_layers):
        hidden.append(
            (Tensor(_glorot(rng, w_in, l), requires_grad=True),
             Tensor(np.zeros((1, l)), requires_grad=True))
        )
        w_in = l
    return EncoderParams(
        hidden=hidden,
        w_mean=Tensor(_glorot(rng, l, k), requires_grad=True),
        b_mean=Tensor(np.zeros((1, k)), requires_grad=True),
        w_logvar=Tensor(_glorot(rng, l, k), requires_grad=True),
        b_logvar=Tensor(np.zeros((1, k)), requires_grad=True),
    )


def init_params(
    v: int,
    m: int | None,
    total_sentences: int,
    hyper: HyperParams,
    seed: int,
) -> ModelParams:
    """Seeded Glorot-uniform weights, zero biases and control scores.

    The external encoder and attention weights exist only when an
    embedding width ``m`` is given; a purely internal model has no use
    for them and their absence keeps checkpoints minimal.
    """
    hyper.validate()
    if v < 1 or total_sentences < 1:
        raise ConfigError("need a non-empty vocabulary and at least one sentence")
    if m is None and hyper.needs_embeddings:
        raise ConfigError(
            f"variant {hyper.variant!r} with these combination weights needs embeddings"
        )
    rng = np.random.default_rng(seed)
    enc_bow = _init_encoder(rng, v, hyper.l, hyper.k, hyper.hidden_layers)
    enc_ext = None
    att_w = att_b = att_v = None
    if m is not None:
        enc_ext = _init_encoder(rng, m, hyper.l, hyper.k, hyper.hidden_layers)
        att_w = Tensor(_glorot(rng, m, m), requires_grad=True)
        att_b = Tensor(np.zeros((1, m)), requires_grad=True)
        att_v = Tensor(_glorot(rng, m, 1), requires_grad=True)
    return ModelParams(
        v=v,
        k=hyper.k,
        l=hyper.l,
        m=m,
        total_sentences=total_sentences,
        enc_bow=enc_bow,
        enc_ext=enc_ext,
        word_topic=Tensor(_glorot(rng, v, hyper.k), requires_grad=True),
        att_w=att_w,
        att_b=att_b,
        att_v=att_v,
        sent_control=Tensor(np.zeros((total_sentences, 1)), requires_grad=True),
        decoder_bias=Tensor(np.zeros((1, v)), requires_grad=True)
        if hyper.use_decoder_bias else None,
    )


def _encode(enc: EncoderParams, x: Tensor, what: str) -> DiagGaussian:
    if x.shape[1] != enc.input_width:
        raise ShapeError(
            f"{what}: input width {x.shape[1]} does not match encoder width {enc.input_width}"
        )
    h = x
    for w, b in enc.hidden:
        h = ad.tanh(ad.affine(h, w, b))
    mean = ad.affine(h, enc.w_mean, enc.b_mean)
    log_var = ad.clip(ad.affine(h, enc.w_logvar, enc.b_logvar), LOGVAR_MIN, LOGVAR_MAX)
    return DiagGaussian(mean, log_var)


def encode_internal(params: ModelParams, counts: Tensor) -> DiagGaussian:
    """Posterior rows for bag-of-words count rows (documents or sentences)."""
    return _encode(params.enc_bow, counts, "encode_internal")


def encode_external(params: ModelParams, embedded: Tensor) -> DiagGaussian:
    """Posterior rows for embedding rows (words, sentences, or documents)."""
    if params.enc_ext is None:
        raise ConfigError("model has no external encoder (built without embeddings)")
    return _encode(params.enc_ext, embedded, "encode_external")


def reparam_sample(posterior: DiagGaussian, eps: np.ndarray) -> Tensor:
    """``mean + exp(log_var / 2) * eps`` with injected noise."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != posterior.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match posterior {posterior.shape}")
    std = ad.exp(ad.scale(posterior.log_var, 0.5))
    return ad.add(posterior.mean, ad.mul(std, Tensor(eps)))


def attention_doc_embedding(
    params: ModelParams, sent_block: np.ndarray, normalizer: str
) -> tuple[Tensor, Tensor, Tensor]:
    """Learned scores, simplex weights, and the weighted document vector.

    ``sent_block`` is one document's sentence embeddings (J x M).  Returns
    ``(scores (J x 1), weights (1 x J), doc_vector (1 x M))``.
    """
    if params.att_w is None:
        raise ConfigError("model has no attention weights (built without embeddings)")
    x = Tensor(sent_block)
    h = ad.tanh(ad.affine(x, params.att_w, params.att_b))
    scores = ad.matmul(h, params.att_v)
    weights = _normalize_row(ad.transpose(scores), normalizer)
    doc_vec = ad.matmul(weights, x)
    return scores, weights, doc_vec


def centroid_distance_weights(sent_block: np.ndarray) -> np.ndarray:
    """Parameter-free sentence scores: negated Euclidean distance to the
    document's sentence-embedding centroid, shape (J, 1)."""
    block = np.asarray(sent_block, dtype=np.float64)
    centroid = block.mean(axis=0, keepdims=True)
    return -np.linalg.norm(block - centroid, axis=1, keepdims=True)


def _normalize_row(row: Tensor, normalizer: str) -> Tensor:
    if normalizer == "softmax":
        return ad.softmax_rows(row)
    if normalizer == "sparsemax":
        return ad.sparsemax_rows(row)
    raise ConfigError(f"unknown normalizer {normalizer!r}")


def combine(
    phi_bow: Tensor,
    phi_ext: Tensor | None,
    s_bow: Tensor,
    s_ext: Tensor | None,
    z_bow: Tensor,
    z_ext: Tensor | None,
    hyper: HyperParams,
) -> tuple[Tensor, Tensor, Tensor]:
    """Fold external latents into the internal ones and normalize.

    A zero combination weight skips its external term entirely, so the
    all-zero setting computes exactly the internal-only model.
    """
    if hyper.gamma1 != 0.0:
        if phi_ext is None:
            raise ConfigError("gamma1 is nonzero but there is no external word posterior")
        phi = ad.add(phi_bow, ad.scale(phi_ext, hyper.gamma1))
    else:
        phi = phi_bow
    if hyper.gamma2 != 0.0:
        if s_ext is None:
            raise ConfigError("gamma2 is nonzero but there is no external sentence posterior")
        s = ad.add(s_bow, ad.scale(s_ext, hyper.gamma2))
    else:
        s = s_bow
    if hyper.gamma3 != 0.0:
        if z_ext is None:
            raise ConfigError("gamma3 is nonzero but there is no external document posterior")
        z = ad.add(z_bow, ad.scale(z_ext, hyper.gamma3))
    else:
        z = z_bow
    return phi, ad.sparsemax_rows(s), ad.softmax_rows(z)


def decode_log_probs(topics: Tensor, phi: Tensor, bias: Tensor | None = None) -> Tensor:
    """Row-wise word log-probabilities: ``log_softmax(topics @ phi^T)``."""
    if topics.shape[1] != phi.shape[1]:
        raise ShapeError(
            f"decode: topic width {topics.shape[1]} does not match phi width {phi.shape[1]}"
        )
    logits = ad.matmul(topics, ad.transpose(phi))
    if bias is not None:
        logits = ad.add(logits, bias)
    return ad.log_softmax_rows(logits)


def multinomial_loglik(counts: np.ndarray | Tensor, log_probs: Tensor) -> Tensor:
    """``sum(counts * log_probs)``; the count-vector coefficient is omitted."""
    c = counts if isinstance(counts, Tensor) else Tensor(np.asarray(counts, dtype=np.float64))
    if c.shape != log_probs.shape:
        raise ShapeError(f"counts {c.shape} and log-probs {log_probs.shape} disagree")
    return ad.tsum(ad.mul(c, log_probs))


def kl_diag_gauss_rows(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Row-wise KL(q || p) for diagonal Gaussians, shape (R, 1).

    ``p`` may be a single row broadcast against all rows of ``q``.
    """
    k = q.shape[1]
    if p.shape[1] != k:
        raise ShapeError(f"KL: widths disagree, {q.shape} vs {p.shape}")
    lv_term = ad.tsum(ad.sub(p.log_var, q.log_var), axis=1)
    diff = ad.sub(q.mean, p.mean)
    quad = ad.mul(
        ad.add(ad.exp(q.log_var), ad.mul(diff, diff)),
        ad.exp(ad.scale(p.log_var, -1.0)),
    )
    half = ad.scale(ad.add(lv_term, ad.tsum(quad, axis=1)), 0.5)
    return ad.sub(half, Tensor(0.5 * k))


def kl_standard_rows(q: DiagGaussian) -> Tensor:
    """Row-wise KL(q || N(0, I)), shape (R, 1)."""
    inner = ad.sub(ad.add(ad.exp(q.log_var), ad.mul(q.mean, q.mean)), q.log_var)
    return ad.sub(ad.scale(ad.tsum(inner, axis=1), 0.5), Tensor(0.5 * q.shape[1]))


def kl_diag_gauss(q: DiagGaussian, p: DiagGaussian) -> Tensor:
    """Total KL(q || p) over all rows, a 1x1 tensor."""
    return ad.tsum(kl_diag_gauss_rows(q, p))


def doc_kl_term(
    z_bow: DiagGaussian, z_ext: DiagGaussian | None, beta0: float
) -> Tensor:
    """Document regularizer: prior KL of both document posteriors, summed
    over the rows given (one row per document)."""
    total = ad.tsum(kl_standard_rows(z_bow))
    if z_ext is not None:
        total = ad.add(total, ad.tsum(kl_standard_rows(z_ext)))
    return ad.scale(total, beta0)


def word_reg_term(
    word_topic: Tensor, phi_ext: DiagGaussian | None, lambda1: float, beta2: float
) -> Tensor:
    """Word regularizer: squared norm of the word-topic rows plus the prior
    KL of the external word posteriors."""
    total = ad.scale(ad.tsum(ad.mul(word_topic, word_topic)), lambda1)
    if phi_ext is not None and beta2 != 0.0:
        total = ad.add(total, ad.scale(ad.tsum(kl_standard_rows(phi_ext)), beta2))
    return total


def sent_kl_term(
    s_bow: DiagGaussian,
    s_ext: DiagGaussian | None,
    z_bow_row: DiagGaussian,
    z_ext_row: DiagGaussian | None,
    hyper: HyperParams,
    att_scores: Tensor | None = None,
    att_weights: Tensor | None = None,
    distance_scores: np.ndarray | None = None,
    control: Tensor | None = None,
) -> Tensor:
    """Sentence regularizer for one document's J sentences.

    The KL pair per sentence depends on the variant (prior for KL,
    document posterior for the rest); S1/S2 weight the pairs and, in their
    soft form, add the squared penalty pulling the control scores toward
    the reference scores.
    """
    if hyper.variant == "KL":
        pairs = kl_standard_rows(s_bow)
        if s_ext is not None:
            pairs = ad.add(pairs, kl_standard_rows(s_ext))
        return ad.scale(ad.tsum(pairs), hyper.beta1)

    prior_bow = z_bow_row.detach() if hyper.detach_doc_posterior else z_bow_row
    pairs = kl_diag_gauss_rows(s_bow, prior_bow)
    if s_ext is not None:
        if z_ext_row is None:
            raise ConfigError("sentence KL: external side present without document posterior")
        prior_ext = z_ext_row.detach() if hyper.detach_doc_posterior else z_ext_row
        pairs = ad.add(pairs, kl_diag_gauss_rows(s_ext, prior_ext))

    if hyper.variant == "HKL":
        return ad.scale(ad.tsum(pairs), hyper.beta1)

    if hyper.variant == "S1":
        if att_scores is None or att_weights is None:
            raise ConfigError("S1 needs attention scores and weights")
        reference = att_scores
    elif hyper.variant == "S2":
        if distance_scores is None:
            raise ConfigError("S2 needs centroid distance scores")
        reference = Tensor(distance_scores)
    else:  # pragma: no cover - validate() forbids anything else
        raise ConfigError(f"unknown variant {hyper.variant!r}")

    if hyper.hard_weights:
        if hyper.variant == "S1":
            weights = att_weights
        else:
            weights = _normalize_row(ad.transpose(reference), hyper.attention_normalizer)
        return ad.scale(ad.matmul(weights, pairs), hyper.beta1)

    if control is None:
        raise ConfigError("soft S1/S2 needs the per-sentence control scores")
    weights = _normalize_row(ad.transpose(control), hyper.attention_normalizer)
    weighted = ad.scale(ad.matmul(weights, pairs), hyper.beta1)
    target = reference.detach() if hyper.detach_penalty_scores else reference
    gap = ad.sub(control, target)
    penalty = ad.scale(ad.tsum(ad.mul(gap, gap)), hyper.lambda0)
    return ad.add(weighted, penalty)


@dataclass
class Batch:
    """Dense views of a set of documents, ready for one objective pass."""

    doc_indices: list[int]
    doc_counts: np.ndarray                  # B x V
    sent_counts: np.ndarray                 # total sentences x V, stacked
    sent_offsets: list[int]                 # batch-local, length B + 1
    sent_spans: list[tuple[int, int]]       # corpus-global control-row spans
    sent_embs: np.ndarray | None = None     # total sentences x M
    doc_embs: np.ndarray | None = None      # B x M, as provided on disk
    word_embs: np.ndarray | None = None     # V x M
    word_term_weight: float = 1.0

    @property
    def size(self) -> int:
        return len(self.doc_indices)

    @property
    def num_sentences(self) -> int:
        return self.sent_offsets[-1]


def make_batch(
    corpus: BowCorpus,
    doc_indices: Sequence[int],
    embeddings: EmbeddingSet | None = None,
    word_term_weight: float = 1.0,
) -> Batch:
    if not doc_indices:
        raise DataError("make_batch: empty document selection")
    doc_indices = [int(i) for i in doc_indices]
    global_offsets = corpus.sentence_offsets()
    sent_blocks = []
    sent_offsets = [0]
    sent_spans = []
    for i in doc_indices:
        block = corpus.sent_matrix(i)
        sent_blocks.append(block)
        sent_offsets.append(sent_offsets[-1] + block.shape[0])
        sent_spans.append((global_offsets[i], global_offsets[i + 1]))
    batch = Batch(
        doc_indices=doc_indices,
        doc_counts=corpus.doc_matrix(doc_indices),
        sent_counts=np.concatenate(sent_blocks, axis=0),
        sent_offsets=sent_offsets,
        sent_spans=sent_spans,
        word_term_weight=word_term_weight,
    )
    if embeddings is not None:
        embeddings.validate(corpus)
        batch.sent_embs = np.concatenate(
            [embeddings.sent_rows(i) for i in doc_indices], axis=0
        )
        if embeddings.docs is not None:
            batch.doc_embs = embeddings.docs[doc_indices]
        batch.word_embs = embeddings.words
    return batch


@dataclass
class NoiseBundle:
    """Reparameterization noise for one objective pass; ``None`` fields mean
    the corresponding latent is evaluated at its posterior mean."""

    z_bow: np.ndarray | None = None
    s_bow: np.ndarray | None = None
    z_ext: np.ndarray | None = None
    s_ext: np.ndarray | None = None
    phi_ext: np.ndarray | None = None

    @classmethod
    def gaussian(
        cls, rng: np.random.Generator, batch: Batch, k: int, external: bool
    ) -> "NoiseBundle":
        """Standard normal noise in a fixed draw order, so a given generator
        state always produces the same bundle."""
        b, s = batch.size, batch.num_sentences
        z_bow = rng.standard_normal((b, k))
        s_bow = rng.standard_normal((s, k))
        if not external:
            return cls(z_bow=z_bow, s_bow=s_bow)
        v = batch.word_embs.shape[0] if batch.word_embs is not None else 0
        return cls(
            z_bow=z_bow,
            s_bow=s_bow,
            z_ext=rng.standard_normal((b, k)),
            s_ext=rng.standard_normal((s, k)),
            phi_ext=rng.standard_normal((v, k)) if v else None,
        )

    @classmethod
    def zeros(cls, batch: Batch, k: int, external: bool) -> "NoiseBundle":
        b, s = batch.size, batch.num_sentences
        bundle = cls(z_bow=np.zeros((b, k)), s_bow=np.zeros((s, k)))
        if external:
            bundle.z_ext = np.zeros((b, k))
            bundle.s_ext = np.zeros((s, k))
            if batch.word_embs is not None:
                bundle.phi_ext = np.zeros((batch.word_embs.shape[0], k))
        return bundle


@dataclass
class LatentBundle:
    """Everything `run_latents` produces for one batch."""

    z_bow_post: DiagGaussian
    s_bow_post: DiagGaussian
    z_ext_post: DiagGaussian | None
    s_ext_post: DiagGaussian | None
    phi_ext_post: DiagGaussian | None
    z_bow: Tensor
    s_bow: Tensor
    z_ext: Tensor | None
    s_ext: Tensor | None
    phi_ext: Tensor | None
    phi_comb: Tensor
    s_comb: Tensor
    z_comb: Tensor
    att_scores: list[Tensor] | None
    att_weights: list[Tensor] | None
    distance_scores: list[np.ndarray] | None


def _maybe_sample(posterior: DiagGaussian, eps: np.ndarray | None, what: str,
                  sampling: bool) -> Tensor:
    if not sampling:
        return posterior.mean
    if eps is None:
        raise ShapeError(f"run_latents: missing noise for {what}")
    return reparam_sample(posterior, eps)


def run_latents(
    batch: Batch,
    params: ModelParams,
    hyper: HyperParams,
    noise: NoiseBundle | None = None,
) -> LatentBundle:
    """Forward pass up to the combined latents.

    With ``noise`` given, latents are reparameterized samples (training);
    without it they sit at their posterior means (evaluation).
    """
    sampling = noise is not None
    noise = noise or NoiseBundle()
    external = hyper.uses_external_encoder
    variant_scores = hyper.variant in ("S1", "S2")

    z_bow_post = encode_internal(params, Tensor(batch.doc_counts))
    s_bow_post = encode_internal(params, Tensor(batch.sent_counts))
    z_bow = _maybe_sample(z_bow_post, noise.z_bow, "z_bow", sampling)
    s_bow = _maybe_sample(s_bow_post, noise.s_bow, "s_bow", sampling)

    z_ext_post = s_ext_post = phi_ext_post = None
    z_ext = s_ext = phi_ext = None
    att_scores = att_weights = None
    distance_scores = None

    if external or variant_scores:
        if batch.sent_embs is None:
            raise ConfigError(
                f"variant {hyper.variant!r} with these weights needs sentence embeddings"
            )
        mode = hyper.resolved_doc_emb_mode()
        if mode == "attention" or hyper.variant == "S1":
            att_scores, att_weights, doc_vecs = [], [], []
            for b in range(batch.size):
                lo, hi = batch.sent_offsets[b], batch.sent_offsets[b + 1]
                scores, weights, vec = attention_doc_embedding(
                    params, batch.sent_embs[lo:hi], hyper.attention_normalizer
                )
                att_scores.append(scores)
                att_weights.append(weights)
                doc_vecs.append(vec)
        if hyper.variant == "S2":
            distance_scores = [
                centroid_distance_weights(
                    batch.sent_embs[batch.sent_offsets[b]:batch.sent_offsets[b + 1]]
                )
                for b in range(batch.size)
            ]

    if external:
        mode = hyper.resolved_doc_emb_mode()
        if mode == "attention":
            doc_input: Tensor = ad.vstack(doc_vecs)
        elif mode == "provided":
            if batch.doc_embs is None:
                raise ConfigError("doc_emb_mode 'provided' but the batch has no document vectors")
            doc_input = Tensor(batch.doc_embs)
        else:  # mean
            means = np.stack(
                [
                    batch.sent_embs[batch.sent_offsets[b]:batch.sent_offsets[b + 1]].mean(axis=0)
                    for b in range(batch.size)
                ]
            )
            doc_input = Tensor(means)
        z_ext_post = encode_external(params, doc_input)
        s_ext_post = encode_external(params, Tensor(batch.sent_embs))
        z_ext = _maybe_sample(z_ext_post, noise.z_ext, "z_ext", sampling)
        s_ext = _maybe_sample(s_ext_post, noise.s_ext, "s_ext", sampling)
        if batch.word_embs is not None and (hyper.gamma1 != 0.0 or hyper.beta2 != 0.0):
            phi_ext_post = encode_external(params, Tensor(batch.word_embs))
            phi_ext = _maybe_sample(phi_ext_post, noise.phi_ext, "phi_ext", sampling)
        elif hyper.gamma1 != 0.0 or hyper.beta2 != 0.0:
            raise ConfigError("gamma1/beta2 are nonzero but the batch has no word embeddings")

    phi_comb, s_comb, z_comb = combine(
        params.word_topic, phi_ext, s_bow, s_ext, z_bow, z_ext, hyper
    )
    return LatentBundle(
        z_bow_post=z_bow_post,
        s_bow_post=s_bow_post,
        z_ext_post=z_ext_post,
        s_ext_post=s_ext_post,
        phi_ext_post=phi_ext_post,
        z_bow=z_bow,
        s_bow=s_bow,
        z_ext=z_ext,
        s_ext=s_ext,
        phi_ext=phi_ext,
        phi_comb=phi_comb,
        s_comb=s_comb,
        z_comb=z_comb,
        att_scores=att_scores,
        att_weights=att_weights,
        distance_scores=distance_scores,
    )


def objective(
    batch: Batch,
    params: ModelParams,
    hyper: HyperParams,
    noise: NoiseBundle | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Negative evidence bound for one batch, plus its components.

    Both likelihoods are plain sums over the batch; the word regularizer
    covers the whole vocabulary and is scaled by ``batch.word_term_weight``
    so that one epoch of batches integrates it exactly once.
    """
    hyper.validate()
    lat = run_latents(batch, params, hyper, noise)

    doc_ll = multinomial_loglik(batch.doc_counts, decode_log_probs(
        lat.z_comb, lat.phi_comb, params.decoder_bias))
    sent_ll = multinomial_loglik(batch.sent_counts, decode_log_probs(
        lat.s_comb, lat.phi_comb, params.decoder_bias))

    q_doc = doc_kl_term(lat.z_bow_post, lat.z_ext_post, hyper.beta0)

    soft_scores = hyper.variant in ("S1", "S2") and not hyper.hard_weights
    per_doc_terms = []
    for b in range(batch.size):
        lo, hi = batch.sent_offsets[b], batch.sent_offsets[b + 1]
        control = None
        if soft_scores:
            span = batch.sent_spans[b]
            control = ad.rows(params.sent_control, span[0], span[1])
        per_doc_terms.append(
            sent_kl_term(
                lat.s_bow_post.block(lo, hi),
                lat.s_ext_post.block(lo, hi) if lat.s_ext_post is not None else None,
                lat.z_bow_post.row(b),
                lat.z_ext_post.row(b) if lat.z_ext_post is not None else None,
                hyper,
                att_scores=lat.att_scores[b] if lat.att_scores is not None else None,
                att_weights=lat.att_weights[b] if lat.att_weights is not None else None,
                distance_scores=lat.distance_scores[b]
                if lat.distance_scores is not None else None,
                control=control,
            )
        )
    q_sent = per_doc_terms[0]
    for term in per_doc_terms[1:]:
        q_sent = ad.add(q_sent, term)

    q_word = ad.scale(
        word_reg_term(params.word_topic, lat.phi_ext_post, hyper.lambda1, hyper.beta2),
        batch.word_term_weight,
    )

    loss = ad.sub(q_doc, doc_ll)
    loss = ad.sub(loss, ad.scale(sent_ll, hyper.gamma4))
    loss = ad.add(loss, q_sent)
    loss = ad.add(loss, q_word)
    components = {
        "loss": loss.item(),
        "doc_ll": doc_ll.item(),
        "sent_ll": sent_ll.item(),
        "q_doc": q_doc.item(),
        "q_sent": q_sent.item(),
        "q_word": q_word.item(),
    }
    return loss, components


def save_checkpoint(
    path: str | Path,
    params: ModelParams,
    hyper: HyperParams,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """One JSON header line, then the named tensors as raw float64 blobs in
    declaration order."""
    named = params.named()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "v": params.v,
        "k": params.k,
        "l": params.l,
        "m": params.m,
        "total_sentences": params.total_sentences,
        "step": int(step),
        "hyper": hyper.to_dict(),
        "tensors": [
            {"name": name, "rows": t.shape[0], "cols": t.shape[1]} for name, t in named
        ],
        "extra": extra or {},
    }
    blob = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in named)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)


def _rebuild_encoder(arrays: dict[str, np.ndarray], prefix: str) -> EncoderParams:
    hidden = []
    i = 0
    while f"{prefix}.h{i}.w" in arrays:
        hidden.append(
            (Tensor(arrays.pop(f"{prefix}.h{i}.w"), requires_grad=True),
             Tensor(arrays.pop(f"{prefix}.h{i}.b"), requires_grad=True))
        )
        i += 1
    if not hidden:
        raise DataError(f"checkpoint is missing hidden layers for {prefix}")
    try:
        return EncoderParams(
            hidden=hidden,
            w_mean=Tensor(arrays.pop(f"{prefix}.mean.w"), requires_grad=True),
            b_mean=Tensor(arrays.pop(f"{prefix}.mean.b"), requires_grad=True),
            w_logvar=Tensor(arrays.pop(f"{prefix}.logvar.w"), requires_grad=True),
            b_logvar=Tensor(arrays.pop(f"{prefix}.logvar.b"), requires_grad=True),
        )
    except KeyError as e:
        raise DataError(f"checkpoint is missing tensor {e.args[0]!r}") from e


def load_checkpoint(path: str | Path) -> tuple[ModelParams, HyperParams, dict]:
    """Rebuild parameters and hyperparameters from a checkpoint file."""
    src = Path(path)
    if not src.is_file():
        raise DataError(f"checkpoint {src} does not exist")
    raw = src.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise DataError("checkpoint has no header line")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {header.get('format_version')!r}")

    blob = raw[newline + 1:]
    specs = header.get("tensors", [])
    want = sum(int(s["rows"]) * int(s["cols"]) for s in specs) * 8
    if len(blob) != want:
        raise DataError(f"checkpoint blob holds {len(blob)} bytes, header implies {want}")
    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for s in specs:
        r, c = int(s["rows"]), int(s["cols"])
        size = r * c * 8
        arr = np.frombuffer(blob[offset:offset + size], dtype="<f8").reshape(r, c)
        if not np.all(np.isfinite(arr)):
            raise DataError(f"checkpoint tensor {s['name']!r} holds non-finite values")
        arrays[str(s["name"])] = arr.astype(np.float64)
        offset += size

    hyper = HyperParams.from_dict(header.get("hyper", {}))
    enc_bow = _rebuild_encoder(arrays, "enc_bow")
    enc_ext = _rebuild_encoder(arrays, "enc_ext") if "enc_ext.h0.w" in arrays else None
    try:
        word_topic = Tensor(arrays.pop("word_topic"), requires_grad=True)
        sent_control = Tensor(arrays.pop("sent_control"), requires_grad=True)
    except KeyError as e:
        raise DataError(f"checkpoint is missing tensor {e.args[0]!r}") from e
    att_w = att_b = att_v = None
    if "att.w" in arrays:
        att_w = Tensor(arrays.pop("att.w"), requires_grad=True)
        att_b = Tensor(arrays.pop("att.b"), requires_grad=True)
        att_v = Tensor(arrays.pop("att.v"), requires_grad=True)
    decoder_bias = None
    if "decoder_bias" in arrays:
        decoder_bias = Tensor(arrays.pop("decoder_bias"), requires_grad=True)
    if arrays:
        raise DataError(f"checkpoint holds unexpected tensors: {sorted(arrays)}")

    params = ModelParams(
        v=int(header["v"]),
        k=int(header["k"]),
        l=int(header["l"]),
        m=None if header.get("m") is None else int(header["m"]),
        total_sentences=int(header["total_sentences"]),
        enc_bow=enc_bow,
        enc_ext=enc_ext,
        word_topic=word_topic,
        att_w=att_w,
        att_b=att_b,
        att_v=att_v,
        sent_control=sent_control,
        decoder_bias=decoder_bias,
    )
    if params.word_topic.shape != (params.v, params.k):
        raise DataError("checkpoint word_topic shape disagrees with header dimensions")
    if params.sent_control.shape != (params.total_sentences, 1):
        raise DataError("checkpoint sent_control shape disagrees with header dimensions")
    return params, hyper, header
