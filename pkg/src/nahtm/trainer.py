"""Minibatch training loop with Adam and validation-based model selection.

Determinism contract: two calls to :func:`train` with the same corpus,
embeddings, and config produce bit-identical parameters and history.  All
randomness flows through counter-based generators keyed on the seed and
the epoch number, so batch order and injected noise never depend on how
many RNG draws earlier code consumed:

    shuffle stream   Philox key (seed, 2*epoch)
    noise stream     Philox key (seed, 2*epoch + 1)

Each epoch shuffles the training documents, walks them in fixed-size
batches (last one short), and weights the word-side regularizers by
``batch_size / num_train_docs`` so a full epoch applies them exactly once.
After the epoch, validation perplexity decides whether the current
parameters become the new best (strict improvement, ties keep the earlier
epoch); ``patience`` epochs without improvement stop training early.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .autodiff import Tape, backward
from .corpus import BowCorpus
from .embeddings import EmbeddingSet
from .errors import ConfigError, NumericError
from .evaluate import perplexity
from .model import (
    HyperParams,
    ModelParams,
    NoiseBundle,
    init_params,
    make_batch,
    objective,
)

__all__ = [
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "adam_step",
    "grid_search",
    "read_history_csv",
    "train",
    "write_history_csv",
]

HISTORY_COLUMNS = (
    "epoch",
    "train_loss",
    "doc_ll",
    "sent_ll",
    "q_doc",
    "q_sent",
    "q_word",
    "valid_perplexity",
)


@dataclass
class TrainConfig:
    """Everything a training run depends on, in one flat record."""

    k: int = 20
    l: int = 100
    hidden_layers: int = 1
    gamma1: float = 0.01
    gamma2: float = 0.001
    gamma3: float = 0.01
    gamma4: float = 1.0
    beta0: float = 1.0
    beta1: float = 0.1
    beta2: float = 0.001
    lambda0: float = 1.0
    lambda1: float = 0.01
    variant: str = "HKL"
    attention_normalizer: str = "softmax"
    hard_weights: bool = False
    doc_emb_mode: str = "auto"
    use_decoder_bias: bool = False
    detach_doc_posterior: bool = False
    detach_penalty_scores: bool = False
    learning_rate: float = 0.002
    batch_size: int = 20
    max_epochs: int = 50
    patience: int = 10
    seed: int = 0

    _HYPER_FIELDS = (
        "k", "l", "hidden_layers", "gamma1", "gamma2", "gamma3", "gamma4",
        "beta0", "beta1", "beta2", "lambda0", "lambda1", "variant",
        "attention_normalizer", "hard_weights", "doc_emb_mode",
        "use_decoder_bias", "detach_doc_posterior", "detach_penalty_scores",
    )

    def to_hyper(self) -> HyperParams:
        return HyperParams(**{name: getattr(self, name) for name in self._HYPER_FIELDS})

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be at least 1, got {self.patience}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        self.to_hyper().validate()

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    """First/second moment accumulators, keyed by parameter name."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(named_params: Iterable, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; gradients are consumed
    (zeroed) so the next backward pass starts clean."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, tensor in named_params:
        g = tensor.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        tensor.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        tensor.zero_grad()


@dataclass
class TrainResult:
    """Outcome of a training run; ``params`` hold the best epoch's weights."""

    params: ModelParams
    hyper: HyperParams
    best_epoch: int
    best_valid_perplexity: float
    history: list[dict]
    stopped_early: bool


def _epoch_generators(seed: int, epoch: int) -> tuple[np.random.Generator, np.random.Generator]:
    shuffle = np.random.Generator(np.random.Philox(key=[seed, 2 * epoch]))
    noise = np.random.Generator(np.random.Philox(key=[seed, 2 * epoch + 1]))
    return shuffle, noise


def train(
    corpus: BowCorpus,
    embeddings: EmbeddingSet | None,
    config: TrainConfig,
    log: Callable[[str], None] | None = None,
) -> TrainResult:
    config.validate()
    hyper = config.to_hyper()
    if hyper.needs_embeddings and embeddings is None:
        raise ConfigError("this configuration needs embeddings but none were given")
    if embeddings is not None:
        embeddings.validate(corpus)
    train_idx = corpus.split_indices("train")
    valid_idx = corpus.split_indices("valid")
    if not train_idx:
        raise ConfigError("corpus has no train split")
    if not valid_idx:
        raise ConfigError("corpus has no valid split")

    m = embeddings.m if embeddings is not None else None
    params = init_params(
        corpus.vocab_size, m, corpus.total_sentences, hyper, config.seed
    )
    state = AdamState()
    external = hyper.uses_external_encoder
    n_train = len(train_idx)

    history: list[dict] = []
    best_snapshot = params.snapshot()
    best_ppl = float("inf")
    best_epoch = 0
    since_improve = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        shuffle_rng, noise_rng = _epoch_generators(config.seed, epoch)
        order = shuffle_rng.permutation(n_train)
        sums = {"train_loss": 0.0, "doc_ll": 0.0, "sent_ll": 0.0,
                "q_doc": 0.0, "q_sent": 0.0, "q_word": 0.0}
        for start in range(0, n_train, config.batch_size):
            chosen = [train_idx[j] for j in order[start:start + config.batch_size]]
            batch = make_batch(
                corpus, chosen, embeddings,
                word_term_weight=len(chosen) / n_train,
            )
            noise = NoiseBundle.gaussian(noise_rng, batch, hyper.k, external)
            params.zero_grads()
            with Tape():
                loss, parts = objective(batch, params, hyper, noise)
            backward(loss)
            adam_step(params.named(), state, config.learning_rate)
            sums["train_loss"] += parts["loss"]
            sums["doc_ll"] += parts["doc_ll"]
            sums["sent_ll"] += parts["sent_ll"]
            sums["q_doc"] += parts["q_doc"]
            sums["q_sent"] += parts["q_sent"]
            sums["q_word"] += parts["q_word"]

        valid_ppl = perplexity(corpus, "valid", params, hyper, embeddings, "document")
        row = {"epoch": epoch, **sums, "valid_perplexity": valid_ppl}
        history.append(row)
        if log is not None:
            log(
                f"epoch {epoch:4d}  loss {sums['train_loss']:14.4f}  "
                f"valid ppl {valid_ppl:10.4f}"
            )

        if valid_ppl < best_ppl:
            best_ppl = valid_ppl
            best_epoch = epoch
            best_snapshot = params.snapshot()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= config.patience:
                stopped_early = True
                break

    params.restore(best_snapshot)
    return TrainResult(
        params=params,
        hyper=hyper,
        best_epoch=best_epoch,
        best_valid_perplexity=best_ppl,
        history=history,
        stopped_early=stopped_early,
    )


def write_history_csv(history: list[dict], path: str | Path) -> None:
    """Epoch records as CSV; float fields use shortest round-trip repr so
    reruns of a deterministic config produce byte-identical files."""
    lines = [",".join(HISTORY_COLUMNS)]
    for row in history:
        cells = []
        for col in HISTORY_COLUMNS:
            val = row[col]
            cells.append(str(val) if isinstance(val, int) else repr(float(val)))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history_csv(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if not text or tuple(text[0].split(",")) != HISTORY_COLUMNS:
        raise ConfigError(f"{path}: unexpected history header")
    rows = []
    for line in text[1:]:
        cells = line.split(",")
        row: dict = {"epoch": int(cells[0])}
        for col, cell in zip(HISTORY_COLUMNS[1:], cells[1:]):
            row[col] = float(cell)
        rows.append(row)
    return rows


def grid_search(
    corpus: BowCorpus,
    embeddings: EmbeddingSet | None,
    base: TrainConfig,
    grid: dict[str, list],
    log: Callable[[str], None] | None = None,
) -> tuple[TrainConfig, list[dict]]:
    """Exhaustive search over the cartesian product of ``grid`` values.

    Combinations run in insertion order of the grid keys; the first
    combination to reach the lowest validation perplexity wins.
    """
    if not grid:
        raise ConfigError("grid is empty")
    known = {f.name for f in fields(TrainConfig)}
    for key, values in grid.items():
        if key not in known:
            raise ConfigError(f"unknown grid key: {key}")
        if not values:
            raise ConfigError(f"grid key {key} has no values")
    keys = list(grid)
    records: list[dict] = []
    best_cfg: TrainConfig | None = None
    best_ppl = float("inf")
    for combo in itertools.product(*(grid[k] for k in keys)):
        cfg = replace(base, **dict(zip(keys, combo)))
        result = train(corpus, embeddings, cfg, log=None)
        records.append({
            "settings": dict(zip(keys, combo)),
            "best_valid_perplexity": result.best_valid_perplexity,
            "best_epoch": result.best_epoch,
        })
        if log is not None:
            pairs = ", ".join(f"{k}={v}" for k, v in zip(keys, combo))
            log(f"{pairs}: valid ppl {result.best_valid_perplexity:.4f}")
        if result.best_valid_perplexity < best_ppl:
            best_ppl = result.best_valid_perplexity
            best_cfg = cfg
    assert best_cfg is not None
    return best_cfg, records
