"""Model assembly: CNN front-end, BLSTM encoder, LSTM prediction network, joint.

Checkpoint format (binary, byte-exact round-trip): magic "RTCK", format
version u32, tensor count u32; per tensor: name length u16 + UTF-8 name,
rank u8, extents u32 each, little-endian float32 row-major values; after the
tensors, a trailing metadata block of UTF-8 "key=value" lines.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import BLANK_ID
from .errors import DataError
from .layers import (
    START,
    Blstm,
    Conv2dLayer,
    Embedding,
    LstmCell,
    LstmState,
    SubsampleSpec,
    group_frames,
    maxpool_time,
    parse_subsample,
)
from .tensor import Tensor, dropout, make_rng
from .transducer import JointNetwork, transducer_nll

log = logging.getLogger(__name__)

_CKPT_MAGIC = b"RTCK"
_CKPT_VERSION = 1

# RNG streams hanging off the config seed.
STREAM_INIT = 10
STREAM_DROPOUT = 11


@dataclass
class ModelConfig:
    """Architecture and feature-pipeline settings for one transducer model."""

    vocab_size: int
    feat_dim: int = 40
    stack_left: int = 3
    stack_right: int = 3
    frame_skip: int = 2
    cnn_layers: int = 2
    cnn_channels: int = 32
    blstm_layers: int = 5
    blstm_hidden: int = 256
    subsample: str = "Py2@2-3"
    pred_layers: int = 2
    pred_hidden: int = 512
    embed_dim: int = 256
    joint_hidden: int = 512
    dropout: float = 0.2
    # Half-width of the uniform weight init.  Desk-scale models train far
    # more reliably at 0.2; the full-scale default stays 0.05.
    init_scale: float = 0.05

    def validate(self) -> SubsampleSpec:
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.init_scale <= 0:
            raise ValueError(f"init_scale must be positive, got {self.init_scale}")
        spec = parse_subsample(self.subsample)
        max_cnn, max_blstm = spec.max_layers()
        if max_cnn > self.cnn_layers:
            raise ValueError(f"subsample {self.subsample!r} pools CNN layer {max_cnn} "
                             f"but the model has {self.cnn_layers}")
        if max_blstm > self.blstm_layers:
            raise ValueError(f"subsample {self.subsample!r} groups BLSTM layer {max_blstm} "
                             f"but the model has {self.blstm_layers}")
        return spec

    @property
    def input_dim(self) -> int:
        return (self.stack_left + 1 + self.stack_right) * self.feat_dim

    def to_meta(self) -> dict[str, str]:
        return {f"config.{f.name}": str(getattr(self, f.name)) for f in fields(self)}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            key = f"config.{f.name}"
            if key not in meta:
                raise DataError(f"checkpoint metadata missing {key}")
            kwargs[f.name] = _parse_field(f, meta[key])
        return cls(**kwargs)


def _parse_field(f, raw: str):
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    return raw


class Model:
    """The transducer: encoder, prediction network, and joint, plus plumbing."""

    def __init__(self, config: ModelConfig, seed: int):
        self.config = config
        self.seed = seed
        spec = config.validate()
        self.subsample_spec = spec
        rng = make_rng(seed, STREAM_INIT)
        self.dropout_rng = make_rng(seed, STREAM_DROPOUT)

        scale = config.init_scale
        self.convs: list[tuple[Conv2dLayer, int]] = []
        in_ch = 1
        for i in range(1, config.cnn_layers + 1):
            layer = Conv2dLayer(in_ch, config.cnn_channels, rng, scale)
            self.convs.append((layer, spec.pool_at(i)))
            in_ch = config.cnn_channels

        enc_in = config.input_dim
        if config.cnn_layers > 0:
            enc_in = config.input_dim * config.cnn_channels
        self.blstms: list[tuple[Blstm, int]] = []
        for i in range(1, config.blstm_layers + 1):
            p = spec.group_at(i)
            layer_in = enc_in * (p if p > 1 else 1)
            layer = Blstm(layer_in, config.blstm_hidden, rng, scale)
            self.blstms.append((layer, p))
            enc_in = layer.out_dim
        self.encoder_dim = enc_in

        self.embedding = Embedding(config.vocab_size, config.embed_dim, rng, scale)
        self.pred_cells: list[LstmCell] = []
        pred_in = config.embed_dim
        for _ in range(config.pred_layers):
            self.pred_cells.append(LstmCell(pred_in, config.pred_hidden, rng, scale))
            pred_in = config.pred_hidden

        self.joint = JointNetwork(self.encoder_dim, config.pred_hidden,
                                  config.joint_hidden, config.vocab_size, rng,
                                  init_scale=scale)
        log.info("built model: %d parameters", self.num_params)

    # -- parameter table ---------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (conv, _) in enumerate(self.convs):
            params.update(conv.parameters(f"enc.cnn{i}"))
        for i, (blstm, _) in enumerate(self.blstms):
            params.update(blstm.parameters(f"enc.blstm{i}"))
        params["pred.embed.weight"] = self.embedding.weight
        for i, cell in enumerate(self.pred_cells):
            params.update(cell.parameters(f"pred.lstm{i}"))
        params.update(self.joint.parameters())
        return params

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    # -- forward passes -------------------------------------------------------

    def encode(self, feats: np.ndarray, training: bool = False) -> Tensor:
        """Stacked feature frames (T, input_dim) -> encoder outputs (T', H_enc)."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 1:
            raise ValueError(f"expected non-empty (T, {self.config.input_dim}) features")
        if feats.shape[1] != self.config.input_dim:
            raise ValueError(f"feature dim {feats.shape[1]} != configured "
                             f"{self.config.input_dim}")
        x = Tensor(feats)
        if self.convs:
            t, f = x.shape
            x = x.reshape(t, f, 1)
            for conv, pool in self.convs:
                x = maxpool_time(conv.forward(x), pool)
            t = x.shape[0]
            x = x.reshape(t, x.shape[1] * x.shape[2])
        for blstm, group in self.blstms:
            if group > 1:
                x = group_frames(x, group)
            x = blstm.forward(x)
            if training and self.config.dropout > 0:
                x = dropout(x, self.config.dropout, self.dropout_rng, training=True)
        return x

    def encoder_output_length(self, T: int) -> int:
        return self.subsample_spec.output_length(T)

    def predict_outputs(self, labels, training: bool = False) -> Tensor:
        """Whole-sequence prediction pass: rows 0..U for prefix lengths 0..U."""
        ids = np.concatenate([[START], np.asarray(labels, dtype=np.int64)])
        x = self.embedding.lookup_sequence(ids)
        for cell in self.pred_cells:
            x = cell.sequence(x)
            if training and self.config.dropout > 0:
                x = dropout(x, self.config.dropout, self.dropout_rng, training=True)
        return x

    def predict_step(self, prev: int, states: list[LstmState] | None = None
                     ) -> tuple[Tensor, list[LstmState]]:
        """Single prediction-network step for decoding.

        ``prev`` is the last emitted (non-blank) symbol or START; feeding
        blank is a caller bug and is rejected.
        """
        if prev == BLANK_ID:
            raise ValueError("blank must not be fed to the prediction network")
        if states is None:
            states = [cell.initial_state() for cell in self.pred_cells]
        x = self.embedding.lookup(prev)
        new_states = []
        for cell, state in zip(self.pred_cells, states):
            x, new_state = cell.step(state, x)
            new_states.append(new_state)
        return x, new_states

    def log_prob_lattice(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        return self.joint.log_prob_lattice(h_enc, h_pred)

    def utterance_loss(self, feats: np.ndarray, labels, training: bool = False) -> Tensor:
        """Negative log-probability of the reference labels for one utterance."""
        h_enc = self.encode(feats, training=training)
        h_pred = self.predict_outputs(labels, training=training)
        z = self.log_prob_lattice(h_enc, h_pred)
        return transducer_nll(z, labels, blank=BLANK_ID, validate=False)

    # -- persistence -----------------------------------------------------------

    def to_checkpoint(self, meta: dict[str, str] | None = None) -> "Checkpoint":
        tensors = {name: p.data.astype("<f4") for name, p in self.parameters().items()}
        full_meta = {**self.config.to_meta(), "seed": str(self.seed), **(meta or {})}
        return Checkpoint(tensors=tensors, meta=full_meta)

    def load_state(self, ckpt: "Checkpoint") -> None:
        params = self.parameters()
        problems = []
        for name, p in params.items():
            if name not in ckpt.tensors:
                problems.append(f"missing tensor {name}")
            elif ckpt.tensors[name].shape != p.data.shape:
                problems.append(f"{name}: checkpoint {ckpt.tensors[name].shape} "
                                f"!= model {p.data.shape}")
        if problems:
            raise DataError("checkpoint/model mismatch:\n  " + "\n  ".join(problems))
        for name, p in params.items():
            p.data = ckpt.tensors[name].astype(p.data.dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint") -> "Model":
        config = ModelConfig.from_meta(ckpt.meta)
        model = cls(config, seed=int(ckpt.meta.get("seed", "0")))
        model.load_state(ckpt)
        return model


def init_prediction_from_lm(model: Model, lm_ckpt: "Checkpoint") -> Model:
    """Copy embedding + LSTM weights from a language-model checkpoint.

    The LM's output projection is dropped (the joint network replaces it);
    encoder and joint weights are untouched.  Any shape mismatch fails with
    a per-tensor report.
    """
    wanted = {name: p for name, p in model.parameters().items()
              if name.startswith("pred.")}
    problems = []
    for name, p in wanted.items():
        if name not in lm_ckpt.tensors:
            problems.append(f"missing tensor {name}")
        elif lm_ckpt.tensors[name].shape != p.data.shape:
            problems.append(f"{name}: lm {lm_ckpt.tensors[name].shape} "
                            f"!= prediction network {p.data.shape}")
    if problems:
        raise DataError("lm/prediction-network mismatch:\n  " + "\n  ".join(problems))
    for name, p in wanted.items():
        p.data = lm_ckpt.tensors[name].astype(p.data.dtype)
    return model


@dataclass
class Checkpoint:
    """Named float32 parameter table plus UTF-8 key=value metadata."""

    tensors: dict[str, np.ndarray]
    meta: dict[str, str]

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_CKPT_MAGIC)
            f.write(struct.pack("<II", _CKPT_VERSION, len(self.tensors)))
            for name, arr in self.tensors.items():
                encoded = name.encode("utf-8")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            for key, value in self.meta.items():
                f.write(f"{key}={value}\n".encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        if blob[:4] != _CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        version, count = struct.unpack_from("<II", blob, 4)
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        tensors: dict[str, np.ndarray] = {}
        try:
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", blob, pos)
                pos += 2
                name = blob[pos:pos + name_len].decode("utf-8")
                pos += name_len
                (rank,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                shape = struct.unpack_from(f"<{rank}I", blob, pos)
                pos += 4 * rank
                n = int(np.prod(shape)) if rank else 1
                arr = np.frombuffer(blob, dtype="<f4", count=n, offset=pos)
                pos += 4 * n
                tensors[name] = arr.reshape(shape).copy()
        except (struct.error, ValueError) as exc:
            raise DataError(f"{path}: truncated checkpoint: {exc}") from exc
        meta: dict[str, str] = {}
        if pos < len(blob):
            for line in blob[pos:].decode("utf-8").splitlines():
                if line:
                    key, _, value = line.partition("=")
                    meta[key] = value
        return cls(tensors=tensors, meta=meta)
