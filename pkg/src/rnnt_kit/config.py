"""Run configuration: sectioned key=value text files with a documented schema.

Every key has a default and a help string; unknown sections or keys are
errors.  parse -> format -> parse is a fixpoint, so configs can be
round-tripped and diffed.  The seed is special: the RNNT_SEED environment
variable overrides the config value, and an explicit command-line flag
overrides both.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainOptions
from .decoding import DecodeOpts


@dataclass(frozen=True)
class ConfigKey:
    section: str
    key: str
    default: str
    kind: type
    help: str


SCHEMA: list[ConfigKey] = [
    # data
    ConfigKey("data", "train_features", "", str, "training feature archive (.rtfa)"),
    ConfigKey("data", "train_transcripts", "", str, "training transcript file"),
    ConfigKey("data", "val_features", "", str, "validation feature archive"),
    ConfigKey("data", "val_transcripts", "", str, "validation transcript file"),
    ConfigKey("data", "vocab", "", str, "vocabulary file (one symbol per line)"),
    ConfigKey("data", "cmvn", "", str, "fitted mean/variance stats file"),
    ConfigKey("data", "stack_left", "3", int, "context frames stacked on the left"),
    ConfigKey("data", "stack_right", "3", int, "context frames stacked on the right"),
    ConfigKey("data", "frame_skip", "2", int, "keep every n-th stacked frame"),
    # model
    ConfigKey("model", "cnn_layers", "2", int, "convolution layers before the BLSTM stack"),
    ConfigKey("model", "cnn_channels", "32", int, "channels per convolution layer"),
    ConfigKey("model", "blstm_layers", "5", int, "BLSTM layers in the encoder"),
    ConfigKey("model", "blstm_hidden", "256", int, "cells per BLSTM direction"),
    ConfigKey("model", "subsample", "Py2@2-3", str,
              "subsample config, e.g. MP2@1-2+Py2@2-3 or none"),
    ConfigKey("model", "pred_layers", "2", int, "prediction-network LSTM layers"),
    ConfigKey("model", "pred_hidden", "512", int, "prediction-network cells per layer"),
    ConfigKey("model", "embed_dim", "256", int, "prediction-network embedding size"),
    ConfigKey("model", "joint_hidden", "512", int, "joint-network hidden width"),
    ConfigKey("model", "dropout", "0.2", float, "dropout probability during training"),
    ConfigKey("model", "init_scale", "0.05", float, "half-width of uniform weight init"),
    # training
    ConfigKey("training", "batch_size", "20", int, "utterances per optimizer step"),
    ConfigKey("training", "max_epochs", "30", int, "epoch budget"),
    ConfigKey("training", "lr", "0.0002", float, "initial learning rate"),
    ConfigKey("training", "lr_first_divisor", "10", float,
              "divisor applied at the first validation-loss increase"),
    ConfigKey("training", "curriculum", "true", bool,
              "sort epoch 1 by utterance length, shuffle afterwards"),
    ConfigKey("training", "grad_clip", "5.0", float, "global gradient-norm clip"),
    ConfigKey("training", "seed", "1234", int,
              "run seed (flag > RNNT_SEED env > config)"),
    ConfigKey("training", "stop_cer", "-1", float,
              "stop early when greedy validation CER falls to this; negative disables"),
    ConfigKey("training", "val_decode_every", "1", int,
              "epochs between greedy validation decodes when stop_cer is set"),
    ConfigKey("training", "min_epochs", "1", int,
              "early stop may not fire before this epoch"),
    ConfigKey("training", "lm_init", "", str,
              "LSTM LM checkpoint used to initialize the prediction network"),
    # decoding
    ConfigKey("decoding", "beam", "5", int, "beam width"),
    ConfigKey("decoding", "temperature", "1.0", float, "softmax temperature"),
    ConfigKey("decoding", "lm_weight", "0.0", float, "shallow-fusion weight"),
    ConfigKey("decoding", "length_reward", "0.0", float, "per-symbol score bonus"),
    ConfigKey("decoding", "max_emit", "10", int, "emission cap per frame"),
    ConfigKey("decoding", "nbest", "1", int, "hypotheses to report per utterance"),
    # lm
    ConfigKey("lm", "order", "5", int, "n-gram order"),
    ConfigKey("lm", "backoff", "0.4", float, "stupid-backoff discount"),
    ConfigKey("lm", "lm_epochs", "5", int, "LSTM LM training epochs"),
    ConfigKey("lm", "lm_lr", "0.01", float, "LSTM LM learning rate"),
    ConfigKey("lm", "lm_batch", "16", int, "LSTM LM sentences per step"),
]

_SECTIONS = ["data", "model", "training", "decoding", "lm"]
_BY_KEY = {(k.section, k.key): k for k in SCHEMA}


def _convert(spec: ConfigKey, raw: str):
    raw = raw.strip()
    try:
        if spec.kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return spec.kind(raw)
    except ValueError as exc:
        raise ConfigError(f"[{spec.section}] {spec.key}: cannot parse {raw!r} "
                          f"as {spec.kind.__name__}") from exc


class RunConfig:
    """Typed view over the sectioned key=value file."""

    def __init__(self):
        self.values = {(k.section, k.key): _convert(k, k.default) for k in SCHEMA}

    def get(self, section: str, key: str):
        if (section, key) not in self.values:
            raise ConfigError(f"unknown config key [{section}] {key}")
        return self.values[(section, key)]

    def set(self, section: str, key: str, raw: str) -> None:
        spec = _BY_KEY.get((section, key))
        if spec is None:
            raise ConfigError(f"unknown config key [{section}] {key}")
        self.values[(section, key)] = _convert(spec, raw)

    # -- file I/O --

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        config = cls()
        section = None
        for ln, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if stripped.startswith("[") and stripped.endswith("]"):
                section = stripped[1:-1]
                if section not in _SECTIONS:
                    raise ConfigError(f"line {ln}: unknown section [{section}]")
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {ln}: expected key = value")
            if section is None:
                raise ConfigError(f"line {ln}: key outside any section")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            config.set(section, key, raw)
        return config

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def format(self) -> str:
        lines = []
        for section in _SECTIONS:
            lines.append(f"[{section}]")
            for spec in SCHEMA:
                if spec.section != section:
                    continue
                value = self.values[(section, spec.key)]
                if spec.kind is bool:
                    value = "true" if value else "false"
                lines.append(f"{spec.key} = {value}")
            lines.append("")
        return "\n".join(lines)

    # -- adapters into module option types --

    def model_config(self, vocab_size: int, feat_dim: int) -> ModelConfig:
        g = self.get
        return ModelConfig(
            vocab_size=vocab_size, feat_dim=feat_dim,
            stack_left=g("data", "stack_left"), stack_right=g("data", "stack_right"),
            frame_skip=g("data", "frame_skip"),
            cnn_layers=g("model", "cnn_layers"), cnn_channels=g("model", "cnn_channels"),
            blstm_layers=g("model", "blstm_layers"),
            blstm_hidden=g("model", "blstm_hidden"),
            subsample=g("model", "subsample"),
            pred_layers=g("model", "pred_layers"), pred_hidden=g("model", "pred_hidden"),
            embed_dim=g("model", "embed_dim"), joint_hidden=g("model", "joint_hidden"),
            dropout=g("model", "dropout"), init_scale=g("model", "init_scale"))

    def train_options(self, seed: int, fixed_timing: bool = False) -> TrainOptions:
        g = self.get
        return TrainOptions(
            batch_size=g("training", "batch_size"),
            max_epochs=g("training", "max_epochs"),
            lr=g("training", "lr"),
            lr_first_divisor=g("training", "lr_first_divisor"),
            curriculum=g("training", "curriculum"),
            grad_clip=g("training", "grad_clip"),
            seed=seed,
            stop_cer=g("training", "stop_cer"),
            val_decode_every=g("training", "val_decode_every"),
            min_epochs=g("training", "min_epochs"),
            fixed_timing=fixed_timing)

    def decode_opts(self) -> DecodeOpts:
        g = self.get
        return DecodeOpts(beam=g("decoding", "beam"),
                          temperature=g("decoding", "temperature"),
                          lm_weight=g("decoding", "lm_weight"),
                          length_reward=g("decoding", "length_reward"),
                          max_emit=g("decoding", "max_emit"),
                          nbest=g("decoding", "nbest"))


def resolve_seed(flag_value: int | None, config: RunConfig) -> int:
    """Documented precedence: command-line flag > RNNT_SEED env > config."""
    if flag_value is not None:
        return flag_value
    env = os.environ.get("RNNT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"RNNT_SEED must be an integer, got {env!r}") from exc
    return config.get("training", "seed")


def schema_help_lines() -> list[str]:
    return [f"  {k.section}.{k.key} = {k.default or '(unset)'}  -- {k.help}"
            for k in SCHEMA]
