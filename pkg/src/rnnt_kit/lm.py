"""Character language models: count-based n-gram with stupid backoff, and an
LSTM LM trainer whose checkpoints can seed the prediction network.

The n-gram scorer returns log *scores*: stupid backoff multiplies a fixed
discount per backed-off level instead of renormalizing, so mass across
backoff boundaries does not sum to one.  Shallow fusion treats it as a
score, never a probability.

N-gram model file format (UTF-8, diffable): a header of key=value lines
(order, alpha, vocab_hash), then one "[k]" block per n-gram order with
sorted "context... symbol count" lines.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BLANK_ID, Vocabulary
from .errors import DataError
from .layers import START, Embedding, LstmCell
from .model import Checkpoint, ModelConfig
from .tensor import Tensor, log_softmax, make_rng, no_grad
from .training import AdamState, adam_step

SENT_BEGIN = "<s>"
SENT_END = "</s>"

STREAM_LM_SHUFFLE = 13
STREAM_LM_INIT = 14

# The LM head predicts sentence end on class 0: blank never appears in
# transcripts, and the head is dropped when the weights seed the
# prediction network, so the slot is free.
SENT_END_ID = BLANK_ID


def vocab_fingerprint(vocab: Vocabulary) -> str:
    return hashlib.sha256("\n".join(vocab.symbols).encode("utf-8")).hexdigest()[:16]


class NgramLm:
    """Stupid-backoff n-gram over symbol strings (characters plus markers)."""

    def __init__(self, order: int = 5, alpha: float = 0.4, vocab_hash: str = ""):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.order = order
        self.alpha = alpha
        self.vocab_hash = vocab_hash
        self.counts: dict[tuple[str, ...], int] = defaultdict(int)
        self.context_totals: dict[tuple[str, ...], int] = defaultdict(int)
        self.symbols: set[str] = set()

    @classmethod
    def train(cls, corpus, order: int = 5, alpha: float = 0.4,
              vocab_hash: str = "") -> "NgramLm":
        """Count n-grams of every order over marker-padded sentences."""
        lm = cls(order=order, alpha=alpha, vocab_hash=vocab_hash)
        n_sentences = 0
        for sentence in corpus:
            seq = [SENT_BEGIN, *sentence, SENT_END]
            n_sentences += 1
            lm.symbols.update(seq)
            for pos in range(1, len(seq)):
                for k in range(1, order + 1):
                    if pos - k + 1 < 0:
                        break
                    gram = tuple(seq[pos - k + 1:pos + 1])
                    lm.counts[gram] += 1
                    lm.context_totals[gram[:-1]] += 1
        if n_sentences == 0:
            raise DataError("empty corpus")
        return lm

    def score(self, history, symbol: str) -> float:
        """Log score of ``symbol`` after ``history`` (most recent last).

        Uses the longest history suffix whose continuation was observed;
        each level of backoff multiplies the discount alpha.  Always finite.
        """
        history = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        discount = 0.0
        for start in range(len(history) + 1):
            context = history[start:]
            gram = context + (symbol,)
            if self.counts.get(gram, 0) > 0:
                return (discount
                        + np.log(self.counts[gram] / self.context_totals[context]))
            discount += np.log(self.alpha)
        # symbol unseen even as a unigram: one more backoff to uniform
        return discount + np.log(self.alpha) - np.log(max(len(self.symbols), 1))

    def sentence_score(self, sentence) -> float:
        """Sum of per-symbol scores including the end marker."""
        seq = [SENT_BEGIN, *sentence, SENT_END]
        return sum(self.score(seq[:i], seq[i]) for i in range(1, len(seq)))

    # -- persistence --

    def save(self, path) -> None:
        lines = ["ngram v1", f"order={self.order}", f"alpha={self.alpha!r}",
                 f"vocab_hash={self.vocab_hash}"]
        by_order: dict[int, list[str]] = defaultdict(list)
        for gram, count in self.counts.items():
            by_order[len(gram)].append(" ".join(gram) + f" {count}")
        for k in range(1, self.order + 1):
            lines.append(f"[{k}]")
            lines.extend(sorted(by_order.get(k, [])))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NgramLm":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read ngram model {path}: {exc}") from exc
        if not lines or lines[0] != "ngram v1":
            raise DataError(f"{path}: not an ngram model file")
        header = dict(line.split("=", 1) for line in lines[1:4])
        lm = cls(order=int(header["order"]), alpha=float(header["alpha"]),
                 vocab_hash=header.get("vocab_hash", ""))
        for line in lines[4:]:
            if not line or (line.startswith("[") and line.endswith("]")):
                continue
            *gram, count = line.split(" ")
            gram = tuple(gram)
            lm.counts[gram] = int(count)
            lm.context_totals[gram[:-1]] += int(count)
            lm.symbols.update(gram)
        return lm


def fusion_scorer(lm: NgramLm, vocab: Vocabulary):
    """Adapt an NgramLm to the beam's (prefix_ids, next_id) -> score interface.

    The emitted prefix is scored in sentence context, i.e. with the begin
    marker prepended.
    """
    def scorer(prefix_ids: tuple[int, ...], next_id: int) -> float:
        history = (SENT_BEGIN, *(vocab.symbols[i] for i in prefix_ids))
        return lm.score(history, vocab.symbols[next_id])

    return scorer


# -- LSTM language model -------------------------------------------------------------


@dataclass
class LstmLmConfig:
    """Shape of the LSTM LM; must mirror the prediction network for transfer."""

    vocab_size: int
    layers: int = 2
    hidden: int = 512
    embed_dim: int = 256
    init_scale: float = 0.05

    @classmethod
    def matching_prediction(cls, model_config: ModelConfig) -> "LstmLmConfig":
        return cls(vocab_size=model_config.vocab_size,
                   layers=model_config.pred_layers,
                   hidden=model_config.pred_hidden,
                   embed_dim=model_config.embed_dim,
                   init_scale=model_config.init_scale)

    def to_meta(self) -> dict[str, str]:
        return {"lm.vocab_size": str(self.vocab_size), "lm.layers": str(self.layers),
                "lm.hidden": str(self.hidden), "lm.embed_dim": str(self.embed_dim)}


class LstmLm:
    """Next-symbol LSTM LM over transcript characters.

    Parameter names deliberately match the prediction network
    ("pred.embed.weight", "pred.lstm<i>.*") so a checkpoint can be
    transplanted directly; the softmax head lives under "lm_head.*" and is
    dropped on transfer.
    """

    def __init__(self, config: LstmLmConfig, seed: int):
        self.config = config
        self.seed = seed
        rng = make_rng(seed, STREAM_LM_INIT)
        scale = config.init_scale
        self.embedding = Embedding(config.vocab_size, config.embed_dim, rng, scale)
        self.cells: list[LstmCell] = []
        in_dim = config.embed_dim
        for _ in range(config.layers):
            self.cells.append(LstmCell(in_dim, config.hidden, rng, scale))
            in_dim = config.hidden
        self.head_w = Tensor(rng.uniform(-scale, scale,
                                         (config.hidden, config.vocab_size)),
                             requires_grad=True)
        self.head_b = Tensor(rng.uniform(-scale, scale, config.vocab_size),
                             requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        params = {"pred.embed.weight": self.embedding.weight}
        for i, cell in enumerate(self.cells):
            params.update(cell.parameters(f"pred.lstm{i}"))
        params["lm_head.w"] = self.head_w
        params["lm_head.b"] = self.head_b
        return params

    def hidden_sequence(self, ids) -> Tensor:
        """Hidden states for inputs [START, y1..yU]."""
        inputs = np.concatenate([[START], np.asarray(ids, dtype=np.int64)])
        x = self.embedding.lookup_sequence(inputs)
        for cell in self.cells:
            x = cell.sequence(x)
        return x

    def sentence_nll(self, ids) -> Tensor:
        """Total negative log-likelihood of y1..yU plus the end marker."""
        hidden = self.hidden_sequence(ids)
        logits = hidden @ self.head_w + self.head_b
        logp = log_softmax(logits, axis=-1)
        targets = np.concatenate([np.asarray(ids, dtype=np.int64), [SENT_END_ID]])
        picked = logp[np.arange(len(targets)), targets]
        return -picked.sum()

    def corpus_perplexity(self, corpus_ids) -> float:
        with no_grad():
            total_nll = 0.0
            total_symbols = 0
            for ids in corpus_ids:
                total_nll += self.sentence_nll(ids).item()
                total_symbols += len(ids) + 1
        return float(np.exp(total_nll / total_symbols))

    def to_checkpoint(self, meta: dict[str, str] | None = None) -> Checkpoint:
        tensors = {name: p.data.astype("<f4") for name, p in self.parameters().items()}
        full_meta = {**self.config.to_meta(), "seed": str(self.seed), **(meta or {})}
        return Checkpoint(tensors=tensors, meta=full_meta)


def train_lstm_lm(corpus_ids, config: LstmLmConfig, epochs: int, seed: int,
                  lr: float = 1e-2, batch_size: int = 16,
                  log=None) -> tuple[LstmLm, list[float]]:
    """Train by next-symbol cross entropy; returns the model and per-epoch
    perplexities on the training corpus."""
    corpus_ids = [np.asarray(ids, dtype=np.int64) for ids in corpus_ids]
    if not corpus_ids:
        raise DataError("empty corpus")
    if any(np.any((ids < 0) | (ids >= config.vocab_size)) or np.any(ids == BLANK_ID)
           for ids in corpus_ids):
        raise DataError("corpus ids must be non-blank and within the vocabulary")
    lm = LstmLm(config, seed=seed)
    params = lm.parameters()
    adam = AdamState.init(params)
    shuffle_rng = make_rng(seed, STREAM_LM_SHUFFLE)
    perplexities = []
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(len(corpus_ids))
        for lo in range(0, len(order), batch_size):
            chunk = [corpus_ids[i] for i in order[lo:lo + batch_size]]
            for p in params.values():
                p.grad = None
            total = None
            n_symbols = 0
            for ids in chunk:
                nll = lm.sentence_nll(ids)
                total = nll if total is None else total + nll
                n_symbols += len(ids) + 1
            loss = total * (1.0 / n_symbols)
            loss.backward()
            adam_step(params, adam, lr)
        pp = lm.corpus_perplexity(corpus_ids)
        perplexities.append(pp)
        if log is not None:
            log(epoch, pp)
    return lm, perplexities
