"""Feature pipeline, vocabulary, dataset file formats, synthetic corpus.

File formats owned here:
  * feature archive: magic "RTFA", version u32, utterance count u32, then per
    utterance: id length u16 + UTF-8 id, T u32, D u32, little-endian float32
    row-major frames.
  * transcripts: UTF-8 lines "utt_id<TAB>space-free character string".
  * vocabulary: UTF-8, one symbol per line; line 0 is "<blank>", line 1 "<unk>".
  * WAV input: 16-bit PCM mono only.
"""
from __future__ import annotations

import string
import struct
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import make_rng

BLANK_ID = 0
UNK_ID = 1
BLANK_SYMBOL = "<blank>"
UNK_SYMBOL = "<unk>"

_ARCHIVE_MAGIC = b"RTFA"
_ARCHIVE_VERSION = 1

# RNG stream ids, so every consumer of a config seed draws independently.
STREAM_TEMPLATES = 0
STREAM_TRAIN_UTTS = 1
STREAM_VAL_UTTS = 2
STREAM_TEST_UTTS = 3


class Vocabulary:
    """Ordered symbol inventory; id 0 is reserved for blank, id 1 for unknown."""

    def __init__(self, symbols: list[str]):
        if len(symbols) < 2 or symbols[0] != BLANK_SYMBOL or symbols[1] != UNK_SYMBOL:
            raise DataError("vocabulary must start with '<blank>' then '<unk>'")
        if len(set(symbols)) != len(symbols):
            raise DataError("vocabulary symbols must be unique")
        self.symbols = list(symbols)
        self._index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def from_characters(cls, chars) -> "Vocabulary":
        return cls([BLANK_SYMBOL, UNK_SYMBOL, *chars])

    @property
    def size(self) -> int:
        return len(self.symbols)

    def id_of(self, symbol: str) -> int:
        return self._index.get(symbol, UNK_ID)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.id_of(ch) for ch in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.symbols[int(i)] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.symbols) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc
        return cls(lines)


@dataclass
class UtteranceRecord:
    uid: str
    feats: np.ndarray          # (T, D) float32
    transcript: np.ndarray     # blank-free symbol ids

    def __post_init__(self):
        if self.feats.ndim != 2 or self.feats.shape[0] < 1:
            raise DataError(f"utterance {self.uid}: empty or malformed features")
        self.transcript = np.asarray(self.transcript, dtype=np.int64).reshape(-1)
        if np.any(self.transcript == BLANK_ID):
            raise DataError(f"utterance {self.uid}: transcript contains blank")


# -- waveform front-end --------------------------------------------------------


def read_wav(path) -> tuple[np.ndarray, int]:
    """16-bit PCM mono WAV -> (samples in [-1, 1], sample rate)."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM mono WAV is supported")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, OSError, EOFError) as exc:
        raise DataError(f"cannot read wav {path}: {exc}") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def mel_filterbank(n_mels: int, n_fft: int, rate: int) -> tuple[np.ndarray, np.ndarray]:
    """Triangular mel filters on FFT bins; also returns filter center Hz."""
    def to_mel(hz):
        return 2595.0 * np.log10(1.0 + hz / 700.0)

    def to_hz(mel):
        return 700.0 * (10.0 ** (mel / 2595.0) - 1.0)

    points_hz = to_hz(np.linspace(to_mel(0.0), to_mel(rate / 2.0), n_mels + 2))
    bin_hz = np.linspace(0.0, rate / 2.0, n_fft // 2 + 1)
    bank = np.zeros((n_mels, len(bin_hz)))
    for m in range(n_mels):
        lo, center, hi = points_hz[m], points_hz[m + 1], points_hz[m + 2]
        rising = (bin_hz - lo) / max(center - lo, 1e-12)
        falling = (hi - bin_hz) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank, points_hz[1:-1]


def fbank(samples: np.ndarray, rate: int, n_mels: int = 40,
          win_ms: float = 25.0, hop_ms: float = 10.0,
          preemphasis: float = 0.97) -> np.ndarray:
    """Log mel-filterbank features from a waveform.

    Pre-emphasis, Hann window, power spectrum, triangular mel bank, then
    ln(energy + 1e-10).  Frame count is 1 + floor((len - win) / hop).
    """
    if rate < 8000:
        raise DataError(f"sample rate {rate} below 8 kHz")
    win = int(round(rate * win_ms / 1000.0))
    hop = int(round(rate * hop_ms / 1000.0))
    if len(samples) < win:
        raise DataError(f"signal too short: {len(samples)} samples < one {win}-sample window")
    emphasized = np.concatenate([samples[:1], samples[1:] - preemphasis * samples[:-1]])
    n_frames = 1 + (len(emphasized) - win) // hop
    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = emphasized[idx] * window
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bank, _ = mel_filterbank(n_mels, n_fft, rate)
    return np.log(power @ bank.T + 1e-10)


# -- normalization ---------------------------------------------------------------


@dataclass
class CmvnTransform:
    """Global per-dimension mean/variance normalization fitted on training data."""

    mean: np.ndarray
    scale: np.ndarray  # 1 / std

    def apply(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) * self.scale).astype(feats.dtype)

    def save(self, path) -> None:
        lines = ["cmvn v1", str(len(self.mean)),
                 " ".join(repr(float(v)) for v in self.mean),
                 " ".join(repr(float(v)) for v in self.scale)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CmvnTransform":
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
            dim = int(lines[1])
            mean = np.array([float(v) for v in lines[2].split()])
            scale = np.array([float(v) for v in lines[3].split()])
        except (OSError, IndexError, ValueError) as exc:
            raise DataError(f"cannot read cmvn stats {path}: {exc}") from exc
        if lines[0] != "cmvn v1" or len(mean) != dim or len(scale) != dim:
            raise DataError(f"malformed cmvn stats file {path}")
        return cls(mean=mean, scale=scale)


def fit_cmvn(feature_arrays) -> CmvnTransform:
    """Fit the global transform; zero-variance dims are floored with a warning."""
    stacked = np.concatenate([np.asarray(f, dtype=np.float64) for f in feature_arrays])
    if stacked.shape[0] < 2:
        raise DataError("cmvn needs at least two frames")
    mean = stacked.mean(axis=0)
    var = stacked.var(axis=0)
    if np.any(var < 1e-8):
        warnings.warn("cmvn: zero-variance dimensions floored at 1e-8")
        var = np.maximum(var, 1e-8)
    return CmvnTransform(mean=mean, scale=1.0 / np.sqrt(var))


def stack_and_skip(feats: np.ndarray, left: int = 3, right: int = 3,
                   skip: int = 2) -> np.ndarray:
    """Concatenate a clamped context window per frame, then keep every
    skip-th frame starting at index 0.  (T, D) -> (ceil(T/skip), (l+1+r)*D).
    """
    T = feats.shape[0]
    cols = [feats[np.clip(np.arange(T) + off, 0, T - 1)]
            for off in range(-left, right + 1)]
    stacked = np.concatenate(cols, axis=1)
    return stacked[::skip]


# -- synthetic corpus -------------------------------------------------------------

_CHAR_POOL = string.ascii_lowercase + string.ascii_uppercase + string.digits


def gen_synthetic(vocab_size: int, n_utts: int, seed: int,
                  stream: int = STREAM_TRAIN_UTTS, n_mels: int = 40,
                  noise: float = 0.1, min_len: int = 2, max_len: int = 12,
                  prefix: str = "synth") -> tuple[list[UtteranceRecord], Vocabulary]:
    """Desk-scale corpus: each character has a fixed random feature template.

    ``vocab_size`` counts the two reserved symbols, so it yields
    vocab_size - 2 characters.  An utterance emits 4..8 template frames per
    character plus Gaussian noise.  Fully determined by (seed, stream);
    templates depend on the seed only, so separate streams share them.
    """
    if vocab_size < 3:
        raise DataError(f"synthetic vocab size must be >= 3, got {vocab_size}")
    n_chars = vocab_size - 2
    if n_chars > len(_CHAR_POOL):
        raise DataError(f"at most {len(_CHAR_POOL)} synthetic characters supported")
    vocab = Vocabulary.from_characters(_CHAR_POOL[:n_chars])
    templates = make_rng(seed, STREAM_TEMPLATES).standard_normal((n_chars, n_mels))
    rng = make_rng(seed, stream)
    utts = []
    for i in range(n_utts):
        length = int(rng.integers(min_len, max_len + 1))
        chars = rng.integers(0, n_chars, size=length)
        frames = []
        for ch in chars:
            reps = int(rng.integers(4, 9))
            block = templates[ch] + noise * rng.standard_normal((reps, n_mels))
            frames.append(block)
        feats = np.concatenate(frames).astype(np.float32)
        transcript = chars + 2  # character ids start after blank/unk
        utts.append(UtteranceRecord(uid=f"{prefix}{i:06d}", feats=feats,
                                    transcript=transcript))
    return utts, vocab


# -- archive and transcript I/O ----------------------------------------------------


def write_feature_archive(path, utterances) -> None:
    with open(path, "wb") as f:
        f.write(_ARCHIVE_MAGIC)
        f.write(struct.pack("<II", _ARCHIVE_VERSION, len(utterances)))
        for utt in utterances:
            uid = utt.uid.encode("utf-8")
            T, D = utt.feats.shape
            f.write(struct.pack("<H", len(uid)))
            f.write(uid)
            f.write(struct.pack("<II", T, D))
            f.write(np.ascontiguousarray(utt.feats, dtype="<f4").tobytes())


def read_feature_archive(path) -> list[tuple[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    if blob[:4] != _ARCHIVE_MAGIC:
        raise DataError(f"{path}: not a feature archive")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _ARCHIVE_VERSION:
        raise DataError(f"{path}: unsupported archive version {version}")
    pos = 12
    out = []
    try:
        for _ in range(count):
            (uid_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            uid = blob[pos:pos + uid_len].decode("utf-8")
            pos += uid_len
            T, D = struct.unpack_from("<II", blob, pos)
            pos += 8
            feats = np.frombuffer(blob, dtype="<f4", count=T * D, offset=pos)
            pos += 4 * T * D
            out.append((uid, feats.reshape(T, D).copy()))
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated archive: {exc}") from exc
    return out


def write_transcripts(path, utterances, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt in utterances:
            f.write(f"{utt.uid}\t{vocab.decode(utt.transcript)}\n")


def read_transcripts(path) -> dict[str, str]:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read transcripts {path}: {exc}") from exc
    out: dict[str, str] = {}
    for ln, line in enumerate(lines, 1):
        if not line:
            continue
        if "\t" not in line:
            raise DataError(f"{path}:{ln}: expected 'utt_id<TAB>text'")
        uid, text = line.split("\t", 1)
        out[uid] = text
    return out


def load_dataset(archive_path, transcripts_path, vocab: Vocabulary) -> list[UtteranceRecord]:
    """Join a feature archive with its transcript file."""
    texts = read_transcripts(transcripts_path)
    utts = []
    for uid, feats in read_feature_archive(archive_path):
        if uid not in texts:
            raise DataError(f"no transcript for utterance {uid}")
        utts.append(UtteranceRecord(uid=uid, feats=feats,
                                    transcript=vocab.encode(texts[uid])))
    return utts
