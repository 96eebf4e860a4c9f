"""Greedy and beam-search decoding, CER scoring, and decode-output files.

The beam is frame-synchronous.  Within a frame, hypotheses expand by
non-blank emissions for up to ``max_emit`` rounds (at the cap they are
forced to take blank); blank moves a hypothesis into the next frame's pool.
Duplicate prefixes are merged by log-adding their transducer mass, so a
hypothesis score is the total probability over all surviving alignments,
comparable with the training objective.  With an exhaustive beam width
nothing is pruned and scores are exact.

Scores rank as: log P_transducer + lm_weight * log P_lm + length_reward * |y|,
with the LM term added per symbol at emission time (shallow fusion).
Ordering is deterministic: ties break by lexicographic token sequence.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import BLANK_ID
from .errors import DataError
from .layers import START
from .tensor import no_grad

LmScorer = Callable[[tuple[int, ...], int], float]


@dataclass
class DecodeOpts:
    beam: int = 5
    temperature: float = 1.0
    lm_weight: float = 0.0
    length_reward: float = 0.0
    max_emit: int = 10
    nbest: int = 1

    def validate(self) -> None:
        if self.beam < 1:
            raise ValueError(f"beam width must be >= 1, got {self.beam}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.max_emit < 1:
            raise ValueError(f"max_emit must be >= 1, got {self.max_emit}")
        if self.nbest < 1:
            raise ValueError(f"nbest must be >= 1, got {self.nbest}")


@dataclass
class Hypothesis:
    """A blank-free prefix with its merged mass and prediction-network snapshot."""

    tokens: tuple[int, ...]
    log_p: float
    lm_score: float = 0.0
    pred_out: np.ndarray | None = None
    states: list = field(default_factory=list)

    def score(self, opts: DecodeOpts) -> float:
        return (self.log_p + opts.lm_weight * self.lm_score
                + opts.length_reward * len(self.tokens))


def greedy_decode(model, feats: np.ndarray, temperature: float = 1.0,
                  max_emit: int = 10) -> np.ndarray:
    """Best-symbol path: emit while the argmax is non-blank (up to the cap),
    then advance to the next frame.  Empty output is valid."""
    with no_grad():
        enc = model.encode(feats).data
        h, states = model.predict_step(START)
        out: list[int] = []
        for t in range(enc.shape[0]):
            emitted = 0
            while True:
                logp = model.joint.step_log_probs(enc[t], h.data, temperature)
                k = int(np.argmax(logp))
                if k == BLANK_ID or emitted >= max_emit:
                    break
                out.append(k)
                emitted += 1
                h, states = model.predict_step(k, states)
    return np.array(out, dtype=np.int64)


def beam_search(model, feats: np.ndarray, opts: DecodeOpts,
                lm_scorer: LmScorer | None = None) -> list[Hypothesis]:
    """Return the top-``beam`` blank-free sequences ranked by score."""
    opts.validate()
    use_lm = lm_scorer is not None and opts.lm_weight != 0.0
    with no_grad():
        enc = model.encode(feats).data
        h0, st0 = model.predict_step(START)
        beam = {(): Hypothesis(tokens=(), log_p=0.0, lm_score=0.0,
                               pred_out=h0.data, states=st0)}
        for t in range(enc.shape[0]):
            done: dict[tuple[int, ...], Hypothesis] = {}
            live = beam
            for round_ in range(opts.max_emit + 1):
                # Candidate children keyed by prefix: (log_p, lm_score, parent, k).
                cand: dict[tuple[int, ...], list] = {}
                for hyp in live.values():
                    logp = model.joint.step_log_probs(enc[t], hyp.pred_out,
                                                      opts.temperature)
                    blank_mass = hyp.log_p + logp[BLANK_ID]
                    prev = done.get(hyp.tokens)
                    if prev is None:
                        done[hyp.tokens] = Hypothesis(
                            tokens=hyp.tokens, log_p=blank_mass,
                            lm_score=hyp.lm_score, pred_out=hyp.pred_out,
                            states=hyp.states)
                    else:
                        prev.log_p = np.logaddexp(prev.log_p, blank_mass)
                    if round_ < opts.max_emit:
                        for k in range(len(logp)):
                            if k == BLANK_ID:
                                continue
                            key = hyp.tokens + (k,)
                            mass = hyp.log_p + logp[k]
                            entry = cand.get(key)
                            if entry is None:
                                lm_add = lm_scorer(hyp.tokens, k) if use_lm else 0.0
                                cand[key] = [mass, hyp.lm_score + lm_add, hyp, k]
                            else:
                                entry[0] = np.logaddexp(entry[0], mass)

                # Joint prune of finished and continuing pools to the beam width.
                pool: list[tuple[float, tuple, str]] = []
                for key, hyp in done.items():
                    pool.append((hyp.score(opts), key, "done"))
                for key, entry in cand.items():
                    score = (entry[0] + opts.lm_weight * entry[1]
                             + opts.length_reward * len(key))
                    pool.append((score, key, "cand"))
                pool.sort(key=lambda item: (-item[0], item[1]))
                keep = pool[:opts.beam]
                done = {key: done[key] for _, key, kind in keep if kind == "done"}
                live = {}
                for _, key, kind in keep:
                    if kind != "cand":
                        continue
                    mass, lm_score, parent, k = cand[key]
                    pred_out, states = model.predict_step(k, parent.states)
                    live[key] = Hypothesis(tokens=key, log_p=mass,
                                           lm_score=lm_score,
                                           pred_out=pred_out.data, states=states)
                if not live:
                    break
            beam = done
    ranked = sorted(beam.values(), key=lambda h: (-h.score(opts), h.tokens))
    return ranked[:opts.beam]


# -- scoring -------------------------------------------------------------------


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(ref: Sequence, hyp: Sequence) -> float:
    """Edit distance divided by reference length; may exceed 1."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(ref, hyp) / len(ref)


@dataclass
class CerReport:
    corpus_cer: float
    total_edits: int
    total_ref_len: int
    per_utt: list[tuple[str, float, int, int]]  # uid, cer, edits, ref_len


def score_corpus(refs: dict[str, str], hyps: dict[str, str]) -> CerReport:
    """Corpus CER = total edits / total reference length, plus a breakdown."""
    per_utt = []
    total_edits = total_len = 0
    for uid in hyps:
        if uid not in refs:
            raise DataError(f"hypothesis for unknown utterance {uid}")
        ref, hyp = refs[uid], hyps[uid]
        if len(ref) == 0:
            raise DataError(f"empty reference for utterance {uid}")
        edits = edit_distance(ref, hyp)
        per_utt.append((uid, edits / len(ref), edits, len(ref)))
        total_edits += edits
        total_len += len(ref)
    if not per_utt:
        raise DataError("no utterances to score")
    return CerReport(corpus_cer=total_edits / total_len, total_edits=total_edits,
                     total_ref_len=total_len, per_utt=per_utt)


# -- decode output files ----------------------------------------------------------


def write_hypotheses(path, rows: list[tuple[str, str, float]]) -> None:
    """One line per utterance: utt_id<TAB>hypothesis<TAB>score."""
    with open(path, "w", encoding="utf-8") as f:
        for uid, text, score in rows:
            f.write(f"{uid}\t{text}\t{score:.6f}\n")


def write_nbest(path, rows: list[tuple[str, int, str, float]]) -> None:
    """N-best variant with a rank column: utt_id<TAB>rank<TAB>hypothesis<TAB>score."""
    with open(path, "w", encoding="utf-8") as f:
        for uid, rank, text, score in rows:
            f.write(f"{uid}\t{rank}\t{text}\t{score:.6f}\n")


def read_hypotheses(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read hypotheses {path}: {exc}") from exc
    out = {}
    for ln, line in enumerate(lines, 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected utt_id<TAB>hypothesis<TAB>score")
        out[parts[0]] = parts[1]
    return out
