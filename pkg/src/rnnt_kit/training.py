"""Adam optimization, sharpened learning-rate decay, curriculum, epoch loop.

The learning-rate schedule holds the initial rate until validation loss
first increases, divides by ``first_divisor`` (10 by default; 2 reproduces
the conventional baseline) at that epoch, then halves every epoch after.

Batched loss is the sum of independent per-utterance losses; padding frames
and padding labels are excluded by construction because each utterance is
sliced back to its true lengths before the forward pass.

Metrics log: one line per epoch, tab-separated:
epoch, train_loss, val_loss, lr, seconds.
"""
from __future__ import annotations

import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import UtteranceRecord, stack_and_skip
from .decoding import edit_distance, greedy_decode
from .errors import NumericalError
from .model import Model
from .tensor import Tensor, make_rng, no_grad

STREAM_SHUFFLE = 12

DEFAULT_LR = 2e-4
DEFAULT_FIRST_DIVISOR = 10.0


@dataclass
class LrSchedule:
    """Piecewise decay driven by the validation-loss sequence.

    States: "holding" until the first epoch whose validation loss exceeds
    the previous epoch's, then "decaying" (halving each epoch).  The first
    decay divides by ``first_divisor`` instead of 2.
    """

    initial_lr: float = DEFAULT_LR
    first_divisor: float = DEFAULT_FIRST_DIVISOR
    lr: float = field(init=False)
    decaying: bool = False
    prev_val: float | None = None
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial learning rate must be positive")
        if self.first_divisor < 1.0:
            raise ValueError("first divisor below 1 would increase the rate")
        self.lr = self.initial_lr

    @property
    def state(self) -> str:
        return "decaying" if self.decaying else "holding"

    def next_lr(self, val_loss: float) -> float:
        """Consume one epoch-end validation loss; return the next epoch's lr."""
        if self.decaying:
            self.lr /= 2.0
        elif self.prev_val is not None and val_loss > self.prev_val:
            self.lr /= self.first_divisor
            self.decaying = True
        self.prev_val = val_loss
        self.history.append(val_loss)
        return self.lr


def curriculum_order(utts: list[UtteranceRecord]) -> np.ndarray:
    """Ascending frame count, ties broken by utterance id."""
    keys = sorted(range(len(utts)), key=lambda i: (utts[i].feats.shape[0], utts[i].uid))
    return np.array(keys, dtype=np.int64)


def shuffled_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


# -- optimizer -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float,
              grads: dict[str, np.ndarray] | None = None) -> None:
    """Bias-corrected Adam update; zero-gradient parameters stay put."""
    if grads is None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in params.items()}
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients when their joint L2 norm exceeds max_norm."""
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# -- batching --------------------------------------------------------------------


@dataclass
class Batch:
    """Padded feature/label tensors plus true per-utterance lengths."""

    uids: list[str]
    feats: np.ndarray          # (N, T_max, D), zero padded
    feat_lengths: np.ndarray   # (N,)
    labels: np.ndarray         # (N, U_max), blank padded
    label_lengths: np.ndarray  # (N,)

    @classmethod
    def from_utterances(cls, utts: list[UtteranceRecord]) -> "Batch":
        n = len(utts)
        t_max = max(u.feats.shape[0] for u in utts)
        u_max = max((len(u.transcript) for u in utts), default=0)
        dim = utts[0].feats.shape[1]
        feats = np.zeros((n, t_max, dim), dtype=np.float64)
        labels = np.zeros((n, max(u_max, 1)), dtype=np.int64)
        feat_lengths = np.zeros(n, dtype=np.int64)
        label_lengths = np.zeros(n, dtype=np.int64)
        for i, u in enumerate(utts):
            feats[i, :u.feats.shape[0]] = u.feats
            labels[i, :len(u.transcript)] = u.transcript
            feat_lengths[i] = u.feats.shape[0]
            label_lengths[i] = len(u.transcript)
        return cls(uids=[u.uid for u in utts], feats=feats,
                   feat_lengths=feat_lengths, labels=labels,
                   label_lengths=label_lengths)

    def __len__(self) -> int:
        return len(self.uids)

    def utterance(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """True-length (features, labels) for one element; padding never leaks."""
        return (self.feats[i, :self.feat_lengths[i]],
                self.labels[i, :self.label_lengths[i]])


def make_batches(utts: list[UtteranceRecord], order: np.ndarray,
                 batch_size: int) -> list[Batch]:
    ordered = [utts[i] for i in order]
    return [Batch.from_utterances(ordered[i:i + batch_size])
            for i in range(0, len(ordered), batch_size)]


def prepared_features(model: Model, raw_feats: np.ndarray) -> np.ndarray:
    cfg = model.config
    return stack_and_skip(raw_feats, cfg.stack_left, cfg.stack_right, cfg.frame_skip)


def batch_loss(model: Model, batch: Batch, training: bool = False) -> Tensor:
    """Sum of per-utterance losses; utterances are evaluated independently."""
    total = None
    for i in range(len(batch)):
        feats, labels = batch.utterance(i)
        loss = model.utterance_loss(prepared_features(model, feats), labels,
                                    training=training)
        total = loss if total is None else total + loss
    return total


# -- epoch loop --------------------------------------------------------------------


@dataclass
class TrainOptions:
    batch_size: int = 20
    max_epochs: int = 30
    lr: float = DEFAULT_LR
    lr_first_divisor: float = DEFAULT_FIRST_DIVISOR
    curriculum: bool = True
    grad_clip: float = 5.0
    seed: int = 1234
    stop_cer: float = -1.0       # early stop when greedy val CER <= this; off if < 0
    val_decode_every: int = 1
    min_epochs: int = 1          # early stop may not fire before this epoch
    fixed_timing: bool = False   # write 0.000 seconds for byte-stable logs


@dataclass
class EpochReport:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float
    val_cer: float | None = None

    def metrics_line(self) -> str:
        return (f"{self.epoch}\t{self.train_loss:.6f}\t{self.val_loss:.6f}"
                f"\t{self.lr:.8g}\t{self.seconds:.3f}")


def read_metrics(path) -> list[EpochReport]:
    reports = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        e, tr, va, lr, sec = line.split("\t")
        reports.append(EpochReport(epoch=int(e), train_loss=float(tr),
                                   val_loss=float(va), lr=float(lr),
                                   seconds=float(sec)))
    return reports


class Trainer:
    """Owns one training run: ordering, batching, optimizer, logs, resume.

    The pinned float32 checkpoint format cannot carry the exact float64
    optimizer state, so resume correctness comes from a separate trainer
    state file (``trainer_state.pkl``) holding full-precision parameters,
    Adam moments, schedule state, and RNG states.
    """

    def __init__(self, model: Model, train_utts: list[UtteranceRecord],
                 val_utts: list[UtteranceRecord], opts: TrainOptions,
                 workdir):
        self.model = model
        self.train_utts = train_utts
        self.val_utts = val_utts
        self.opts = opts
        self.workdir = Path(workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.workdir / "metrics.tsv"
        self.state_path = self.workdir / "trainer_state.pkl"

        self.schedule = LrSchedule(initial_lr=opts.lr,
                                   first_divisor=opts.lr_first_divisor)
        self.adam = AdamState.init(model.parameters())
        self.shuffle_rng = make_rng(opts.seed, STREAM_SHUFFLE)
        self.epoch = 0
        self.best_val = np.inf

    # -- persistence of the full-precision training state --

    def save_state(self) -> None:
        params = {k: p.data for k, p in self.model.parameters().items()}
        state = {
            "epoch": self.epoch,
            "best_val": self.best_val,
            "params": params,
            "adam_m": self.adam.m,
            "adam_v": self.adam.v,
            "adam_step": self.adam.step,
            "schedule": (self.schedule.lr, self.schedule.decaying,
                         self.schedule.prev_val, self.schedule.history),
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "dropout_rng": self.model.dropout_rng.bit_generator.state,
        }
        with open(self.state_path, "wb") as f:
            pickle.dump(state, f)

    def load_state(self) -> None:
        with open(self.state_path, "rb") as f:
            state = pickle.load(f)
        params = self.model.parameters()
        for name, arr in state["params"].items():
            params[name].data = arr
        self.adam.m = state["adam_m"]
        self.adam.v = state["adam_v"]
        self.adam.step = state["adam_step"]
        (self.schedule.lr, self.schedule.decaying,
         self.schedule.prev_val, self.schedule.history) = state["schedule"]
        self.shuffle_rng.bit_generator.state = state["shuffle_rng"]
        self.model.dropout_rng.bit_generator.state = state["dropout_rng"]
        self.epoch = state["epoch"]
        self.best_val = state["best_val"]

    # -- passes --

    def _epoch_order(self, epoch: int) -> np.ndarray:
        if self.opts.curriculum and epoch == 1:
            return curriculum_order(self.train_utts)
        return shuffled_order(len(self.train_utts), self.shuffle_rng)

    def _train_pass(self, epoch: int) -> float:
        params = self.model.parameters()
        batches = make_batches(self.train_utts, self._epoch_order(epoch),
                               self.opts.batch_size)
        total = 0.0
        for b_idx, batch in enumerate(batches):
            for p in params.values():
                p.grad = None
            loss = batch_loss(self.model, batch, training=True)
            if not np.isfinite(loss.data):
                raise NumericalError(
                    f"non-finite loss in epoch {epoch} batch {b_idx} "
                    f"(utterances {batch.uids[:3]}...)")
            loss.backward()
            total += loss.item()
            grads = {k: ((p.grad if p.grad is not None else np.zeros_like(p.data))
                         / len(batch))
                     for k, p in params.items()}
            clip_global_norm(grads, self.opts.grad_clip)
            adam_step(params, self.adam, self.schedule.lr, grads)
        return total / len(self.train_utts)

    def eval_loss(self, utts: list[UtteranceRecord]) -> float:
        with no_grad():
            total = 0.0
            for u in utts:
                total += self.model.utterance_loss(
                    prepared_features(self.model, u.feats), u.transcript).item()
        return total / len(utts)

    def greedy_val_cer(self) -> float:
        edits = length = 0
        for u in self.val_utts:
            hyp = greedy_decode(self.model, prepared_features(self.model, u.feats))
            edits += edit_distance(u.transcript, hyp)
            length += len(u.transcript)
        return edits / length

    def train_one_epoch(self, epoch: int) -> EpochReport:
        start = time.perf_counter()
        lr_used = self.schedule.lr
        train_loss = self._train_pass(epoch)
        val_loss = self.eval_loss(self.val_utts)
        self.schedule.next_lr(val_loss)
        seconds = 0.0 if self.opts.fixed_timing else time.perf_counter() - start
        return EpochReport(epoch=epoch, train_loss=train_loss, val_loss=val_loss,
                           lr=lr_used, seconds=seconds)

    def run(self, resume: bool = False, log=None) -> list[EpochReport]:
        if resume:
            self.load_state()
        else:
            self.metrics_path.write_text("")
        reports = []
        for epoch in range(self.epoch + 1, self.opts.max_epochs + 1):
            report = self.train_one_epoch(epoch)
            self.epoch = epoch
            want_cer = (self.opts.stop_cer >= 0
                        and epoch % self.opts.val_decode_every == 0)
            if want_cer:
                report.val_cer = self.greedy_val_cer()
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(report.metrics_line() + "\n")
            if report.val_loss < self.best_val:
                self.best_val = report.val_loss
                self._save_checkpoint("best.ckpt")
            self._save_checkpoint("last.ckpt")
            self.save_state()
            reports.append(report)
            if log is not None:
                log(report)
            if (want_cer and report.val_cer <= self.opts.stop_cer
                    and epoch >= self.opts.min_epochs):
                break
        return reports

    def _save_checkpoint(self, name: str) -> None:
        meta = {"epoch": str(self.epoch), "best_val_loss": repr(float(self.best_val)),
                "train_seed": str(self.opts.seed)}
        self.model.to_checkpoint(meta).save(self.workdir / name)
