"""Neural layers: embedding, LSTM/BLSTM, pyramid frame grouping, 2-D convolution.

Recurrent layers expose both a differentiable single-step API (used by
decoding and by contract tests) and a fused whole-sequence op with a
hand-written backward pass (used by training, one graph node per layer
per direction).  Both share the same parameters and gate algebra, and a
test pins their equality.

Gate layout along the 4H axis is [input, forget, candidate, output].
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, concat, flip, from_op, _accum

START = -1  # sentinel token id: the sequence-start condition embeds to zeros

CONV_KERNEL = 6  # spatial kernel extent is fixed


def uniform_init(rng: np.random.Generator, shape, scale: float = 0.05) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)


# -- embedding ----------------------------------------------------------------


class Embedding:
    """Token id -> row of a learned table; START embeds to the zero vector."""

    def __init__(self, n_symbols: int, dim: int, rng: np.random.Generator,
                 scale: float = 0.05):
        self.n_symbols = n_symbols
        self.dim = dim
        self.weight = uniform_init(rng, (n_symbols, dim), scale)

    def lookup(self, token: int) -> Tensor:
        if token == START:
            return Tensor(np.zeros(self.dim))
        if not 0 <= token < self.n_symbols:
            raise ValueError(f"token id {token} outside [0, {self.n_symbols})")
        return self.weight[int(token)]

    def lookup_sequence(self, tokens) -> Tensor:
        """Batch lookup; entries equal to START yield zero rows."""
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        if np.any((ids != START) & ((ids < 0) | (ids >= self.n_symbols))):
            raise ValueError("token id out of range")
        table = self.weight
        out = np.zeros((len(ids), self.dim), dtype=table.data.dtype)
        live = ids != START
        out[live] = table.data[ids[live]]

        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, ids[live], g[live])
            _accum(table, full)

        return from_op(out, (table,), bwd)


# -- LSTM ---------------------------------------------------------------------


@dataclass
class LstmState:
    h: Tensor
    c: Tensor


class LstmCell:
    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 scale: float = 0.05):
        self.in_dim = in_dim
        self.hidden = hidden
        self.wx = uniform_init(rng, (in_dim, 4 * hidden), scale)
        self.wh = uniform_init(rng, (hidden, 4 * hidden), scale)
        self.b = uniform_init(rng, (4 * hidden,), scale)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}

    def initial_state(self) -> LstmState:
        zeros = np.zeros(self.hidden)
        return LstmState(h=Tensor(zeros), c=Tensor(zeros.copy()))

    def step(self, state: LstmState, x: Tensor) -> tuple[Tensor, LstmState]:
        """One recurrence step; differentiable through weights, x, and state."""
        if x.shape != (self.in_dim,):
            raise ShapeError(f"expected input shape ({self.in_dim},), got {x.shape}")
        H = self.hidden
        pre = x @ self.wx + state.h @ self.wh + self.b
        i = pre[0:H].sigmoid()
        f = pre[H:2 * H].sigmoid()
        g = pre[2 * H:3 * H].tanh()
        o = pre[3 * H:4 * H].sigmoid()
        c = f * state.c + i * g
        h = o * c.tanh()
        return h, LstmState(h=h, c=c)

    def sequence(self, xs: Tensor) -> Tensor:
        """(T, D) -> (T, H) from a zero initial state, as one fused graph node."""
        if xs.data.ndim != 2 or xs.shape[1] != self.in_dim:
            raise ShapeError(f"expected (T, {self.in_dim}), got {xs.shape}")
        X = xs.data
        T, H = X.shape[0], self.hidden
        wx, wh, b = self.wx, self.wh, self.b

        pre_x = X @ wx.data + b.data
        gates = np.empty((T, 4 * H))
        cells = np.empty((T, H))
        tanh_c = np.empty((T, H))
        prev_h = np.empty((T, H))
        prev_c = np.empty((T, H))
        out = np.empty((T, H))
        h = np.zeros(H)
        c = np.zeros(H)
        for t in range(T):
            prev_h[t] = h
            prev_c[t] = c
            pre = pre_x[t] + h @ wh.data
            i = _sigmoid(pre[0:H])
            f = _sigmoid(pre[H:2 * H])
            g = np.tanh(pre[2 * H:3 * H])
            o = _sigmoid(pre[3 * H:4 * H])
            c = f * c + i * g
            tc = np.tanh(c)
            h = o * tc
            gates[t, 0:H] = i
            gates[t, H:2 * H] = f
            gates[t, 2 * H:3 * H] = g
            gates[t, 3 * H:4 * H] = o
            cells[t] = c
            tanh_c[t] = tc
            out[t] = h

        def bwd(gout):
            dpre = np.empty((T, 4 * H))
            dh_next = np.zeros(H)
            dc_next = np.zeros(H)
            for t in range(T - 1, -1, -1):
                i = gates[t, 0:H]
                f = gates[t, H:2 * H]
                g = gates[t, 2 * H:3 * H]
                o = gates[t, 3 * H:4 * H]
                dh = gout[t] + dh_next
                dc = dc_next + dh * o * (1.0 - tanh_c[t] ** 2)
                dpre[t, 0:H] = dc * g * i * (1.0 - i)
                dpre[t, H:2 * H] = dc * prev_c[t] * f * (1.0 - f)
                dpre[t, 2 * H:3 * H] = dc * i * (1.0 - g ** 2)
                dpre[t, 3 * H:4 * H] = dh * tanh_c[t] * o * (1.0 - o)
                dh_next = dpre[t] @ wh.data.T
                dc_next = dc * f
            _accum(xs, dpre @ wx.data.T)
            _accum(wx, X.T @ dpre)
            _accum(wh, prev_h.T @ dpre)
            _accum(b, dpre.sum(axis=0))

        return from_op(out, (xs, wx, wh, b), bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


class Blstm:
    """Forward and time-reversed LSTM passes, concatenated per frame."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 scale: float = 0.05):
        self.fwd = LstmCell(in_dim, hidden, rng, scale)
        self.bwd = LstmCell(in_dim, hidden, rng, scale)
        self.in_dim = in_dim
        self.out_dim = 2 * hidden

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fwd.parameters(f"{prefix}.fwd"),
                **self.bwd.parameters(f"{prefix}.bwd")}

    def forward(self, xs: Tensor) -> Tensor:
        if xs.shape[0] < 1:
            raise ShapeError("empty sequence")
        f = self.fwd.sequence(xs)
        b = flip(self.bwd.sequence(flip(xs, axis=0)), axis=0)
        return concat([f, b], axis=1)


def group_frames(xs: Tensor, group: int) -> Tensor:
    """Concatenate non-overlapping windows of ``group`` frames.

    (T, D) -> (ceil(T/group), group*D); the final window is zero-padded when
    T is not a multiple of group.
    """
    if group < 2:
        raise ValueError(f"group size must be >= 2, got {group}")
    T, D = xs.shape
    out_t = -(-T // group)
    pad = out_t * group - T
    if pad:
        xs = concat([xs, Tensor(np.zeros((pad, D)))], axis=0)
    return xs.reshape(out_t, group * D)


# -- convolution front-end ------------------------------------------------------


class Conv2dLayer:
    """Stride-1 same-padded convolution over the time-frequency plane.

    The 6x6 kernel is even, so same-padding is asymmetric: 2 leading and 3
    trailing zeros on each spatial axis.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 scale: float = 0.05):
        self.in_channels = in_channels
        self.out_channels = out_channels
        k = CONV_KERNEL
        self.kernel = uniform_init(rng, (out_channels, in_channels, k, k), scale)
        self.bias = uniform_init(rng, (out_channels,), scale)

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.kernel": self.kernel, f"{prefix}.bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        """(T, F, C_in) -> (T, F, C_out)."""
        if x.data.ndim != 3 or x.shape[2] != self.in_channels:
            raise ShapeError(f"expected (T, F, {self.in_channels}), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeError("empty feature map")
        k = CONV_KERNEL
        kernel, bias = self.kernel, self.bias
        T, F = x.shape[0], x.shape[1]
        xp = np.pad(x.data, ((2, 3), (2, 3), (0, 0)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
        # windows: (T, F, C_in, k, k)
        out = np.tensordot(windows, kernel.data, axes=([2, 3, 4], [1, 2, 3])) + bias.data

        def bwd(g):
            dk = np.tensordot(g, windows, axes=([0, 1], [0, 1]))  # (C_out, C_in, k, k)
            _accum(kernel, dk)
            _accum(bias, g.sum(axis=(0, 1)))
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[i:i + T, j:j + F, :] += g @ kernel.data[:, :, i, j]
            _accum(x, dxp[2:2 + T, 2:2 + F, :])

        return from_op(out, (x, kernel, bias), bwd)


def maxpool_time(x: Tensor, pool: int) -> Tensor:
    """Max over non-overlapping windows of ``pool`` frames; pool=1 is identity.

    The final window is zero-padded when T is not a multiple of pool, and the
    backward pass routes each window's gradient to its earliest maximum.
    """
    if pool < 1:
        raise ValueError(f"pool size must be >= 1, got {pool}")
    if pool == 1:
        return x
    T = x.shape[0]
    rest = x.shape[1:]
    out_t = -(-T // pool)
    padded = np.zeros((out_t * pool, *rest), dtype=x.data.dtype)
    padded[:T] = x.data
    grouped = padded.reshape(out_t, pool, *rest)
    arg = grouped.argmax(axis=1)  # first maximal element wins
    out = np.take_along_axis(grouped, arg[:, None], axis=1)[:, 0]

    def bwd(g):
        dgrouped = np.zeros_like(grouped)
        np.put_along_axis(dgrouped, arg[:, None], g[:, None], axis=1)
        _accum(x, dgrouped.reshape(out_t * pool, *rest)[:T])

    return from_op(out, (x,), bwd)


# -- subsample-config grammar ---------------------------------------------------

_TERM_RE = re.compile(r"^(MP|Py)(\d+)@(\d+)(?:-(\d+))?$")


@dataclass(frozen=True)
class SubsampleSpec:
    """Where the encoder contracts time: pools at CNN layers, groups at BLSTM layers.

    Layer indices are 1-based.  Canonical text form joins terms with '+',
    e.g. "MP2@1-2+Py2@2-3"; the empty spec prints as "none".
    """

    cnn_pool: tuple[tuple[int, int], ...] = ()
    pyramid: tuple[tuple[int, int], ...] = ()

    def pool_at(self, layer: int) -> int:
        return dict(self.cnn_pool).get(layer, 1)

    def group_at(self, layer: int) -> int:
        return dict(self.pyramid).get(layer, 1)

    def total(self) -> int:
        factor = 1
        for _, p in (*self.cnn_pool, *self.pyramid):
            factor *= p
        return factor

    def output_length(self, T: int) -> int:
        """Compose the per-stage ceiling contractions in encoder order."""
        for _, p in sorted(self.cnn_pool):
            T = -(-T // p)
        for _, p in sorted(self.pyramid):
            T = -(-T // p)
        return T

    def max_layers(self) -> tuple[int, int]:
        cnn = max((layer for layer, _ in self.cnn_pool), default=0)
        blstm = max((layer for layer, _ in self.pyramid), default=0)
        return cnn, blstm


def parse_subsample(text: str) -> SubsampleSpec:
    text = text.strip()
    if text in ("", "none"):
        return SubsampleSpec()
    cnn: dict[int, int] = {}
    pyr: dict[int, int] = {}
    for term in text.split("+"):
        m = _TERM_RE.match(term.strip())
        if not m:
            raise ValueError(f"bad subsample term {term!r}")
        kind, p, lo, hi = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
        hi = int(hi) if hi is not None else lo
        if p < 2:
            raise ValueError(f"subsample factor must be >= 2 in {term!r}")
        if lo < 1 or hi < lo:
            raise ValueError(f"bad layer range in {term!r}")
        target = cnn if kind == "MP" else pyr
        for layer in range(lo, hi + 1):
            if layer in target:
                raise ValueError(f"layer {layer} assigned twice in {text!r}")
            target[layer] = p
    return SubsampleSpec(cnn_pool=tuple(sorted(cnn.items())),
                         pyramid=tuple(sorted(pyr.items())))


def format_subsample(spec: SubsampleSpec) -> str:
    def terms(kind: str, entries) -> list[str]:
        entries = sorted(entries)
        out = []
        i = 0
        while i < len(entries):
            lo, p = entries[i]
            hi = lo
            while i + 1 < len(entries) and entries[i + 1] == (hi + 1, p):
                hi += 1
                i += 1
            span = f"{lo}" if lo == hi else f"{lo}-{hi}"
            out.append(f"{kind}{p}@{span}")
            i += 1
        return out

    parts = terms("MP", spec.cnn_pool) + terms("Py", spec.pyramid)
    return "+".join(parts) if parts else "none"
