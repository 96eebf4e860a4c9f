"""Joint network and the exact transducer lattice loss.

The lattice is the T x (U+1) grid of (frame, emitted-prefix-length) states.
A valid alignment makes U label moves and T blank moves, the last of which
is the blank taken at the final node (T-1, U) (0-indexed).  The loss is the
negative log of the total path probability, computed in the log domain by
the forward-backward recurrences; gradients come from node occupancies.

Everything here runs on float64 numpy arrays.  -inf is used internally for
off-grid terms; stored alpha/beta tables are finite whenever the input
log-probabilities are.  `brute_force_loss` enumerates every alignment path
and is the independent oracle for the dynamic program.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, from_op, log_softmax, log_sum_exp, pairwise_sum

NEG_INF = -np.inf


@dataclass
class Lattice:
    """Per-node log-probabilities plus the reference label sequence.

    log_probs has shape (T, U+1, K); row u of the middle axis is conditioned
    on having emitted the first u labels.  Labels must not contain blank.
    """

    log_probs: np.ndarray
    labels: np.ndarray
    blank: int = 0

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.log_probs.ndim != 3:
            raise ValueError(f"log_probs must be rank 3, got {self.log_probs.ndim}")
        T, U1, K = self.log_probs.shape
        if T < 1 or U1 != len(self.labels) + 1:
            raise ValueError(f"shape {self.log_probs.shape} inconsistent with "
                             f"{len(self.labels)} labels")
        if np.any(self.labels == self.blank):
            raise ValueError("labels must not contain the blank id")
        if np.any((self.labels < 0) | (self.labels >= K)):
            raise ValueError("label id out of range")

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.shape[1] - 1

    @property
    def K(self) -> int:
        return self.log_probs.shape[2]

    def check_distribution(self, tol: float = 1e-6) -> None:
        """Every node must carry a valid log-distribution over classes."""
        node_mass = log_sum_exp(self.log_probs, axis=2)
        worst = float(np.max(np.abs(node_mass)))
        if not worst <= tol:
            raise ValueError(f"lattice nodes are not normalized (max |lse| = {worst:.3g})")


@dataclass
class AlphaBeta:
    """Forward/backward log-mass tables and the total log-probability."""

    alpha: np.ndarray
    beta: np.ndarray
    log_prob: float = field(default=0.0)


def forward_backward(lat: Lattice) -> AlphaBeta:
    """Fill alpha and beta over the grid; alpha[0,0] = 0, beta[0,0] = logP."""
    z, y, blank = lat.log_probs, lat.labels, lat.blank
    T, U = lat.T, lat.U

    alpha = np.full((T, U + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(1, T):
        alpha[t, 0] = alpha[t - 1, 0] + z[t - 1, 0, blank]
    for u in range(1, U + 1):
        alpha[0, u] = alpha[0, u - 1] + z[0, u - 1, y[u - 1]]
    for t in range(1, T):
        for u in range(1, U + 1):
            alpha[t, u] = np.logaddexp(alpha[t - 1, u] + z[t - 1, u, blank],
                                       alpha[t, u - 1] + z[t, u - 1, y[u - 1]])

    beta = np.full((T, U + 1), NEG_INF)
    beta[T - 1, U] = z[T - 1, U, blank]
    for t in range(T - 2, -1, -1):
        beta[t, U] = z[t, U, blank] + beta[t + 1, U]
    for u in range(U - 1, -1, -1):
        beta[T - 1, u] = z[T - 1, u, y[u]] + beta[T - 1, u + 1]
    for t in range(T - 2, -1, -1):
        for u in range(U - 1, -1, -1):
            beta[t, u] = np.logaddexp(z[t, u, blank] + beta[t + 1, u],
                                      z[t, u, y[u]] + beta[t, u + 1])

    return AlphaBeta(alpha=alpha, beta=beta, log_prob=float(beta[0, 0]))


def rnnt_loss(lat: Lattice, validate: bool = True) -> tuple[float, np.ndarray]:
    """Negative log path probability and its gradient w.r.t. log_probs.

    The gradient formula holds for arbitrary per-node scores, so the
    finite-difference harness may perturb entries freely; pass
    ``validate=False`` to skip the per-node normalization check in that case.
    """
    if validate:
        lat.check_distribution()
    ab = forward_backward(lat)
    z, y, blank = lat.log_probs, lat.labels, lat.blank
    T, U = lat.T, lat.U
    logp = ab.log_prob

    # Blank transitions leave (t, u) for (t+1, u); the one at (T-1, U) exits
    # the grid and carries the remaining mass 1 (log 0).  Blanks at the last
    # frame below u = U fall off every valid path.
    beta_next = np.full((T, U + 1), NEG_INF)
    beta_next[:T - 1, :] = ab.beta[1:, :]
    beta_next[T - 1, U] = 0.0

    grad = np.zeros_like(z)
    with np.errstate(invalid="ignore"):
        occ_blank = np.exp(ab.alpha + z[:, :, blank] + beta_next - logp)
    occ_blank[~np.isfinite(occ_blank)] = 0.0
    grad[:, :, blank] = -occ_blank

    for u in range(U):
        occ = np.exp(ab.alpha[:, u] + z[:, u, y[u]] + ab.beta[:, u + 1] - logp)
        occ[~np.isfinite(occ)] = 0.0
        grad[:, u, y[u]] = -occ

    return -logp, grad


def brute_force_loss(lat: Lattice) -> float:
    """Independent oracle: enumerate every alignment path and sum directly.

    Guarded to small instances (T + U <= 12); the count of free
    interleavings of label moves among non-final blank moves is
    C(T - 1 + U, U).
    """
    T, U = lat.T, lat.U
    if T + U > 12:
        raise ValueError(f"instance too large for brute force: T+U = {T + U}")
    z, y, blank = lat.log_probs, lat.labels, lat.blank
    terms: list[float] = []

    def walk(t: int, u: int, acc: float) -> None:
        if u < U:
            walk(t, u + 1, acc + z[t, u, y[u]])
        if t < T - 1:
            walk(t + 1, u, acc + z[t, u, blank])
        elif u == U:
            terms.append(acc + z[t, u, blank])

    walk(0, 0, 0.0)
    return -log_sum_exp(np.array(terms))


def diagonal_occupancy(lat: Lattice, ab: AlphaBeta, n: int) -> float:
    """Total posterior mass of transitions leaving anti-diagonal ``n``.

    Nodes on diagonal n (1-based, n in [1, T+U]) are those with
    (t+1) + u = n.  Every alignment crosses each diagonal exactly once, so
    the result is 1 for every valid n.
    """
    T, U = lat.T, lat.U
    if not 1 <= n <= T + U:
        raise ValueError(f"diagonal index {n} outside [1, {T + U}]")
    z, y, blank = lat.log_probs, lat.labels, lat.blank
    logp = ab.log_prob
    total = 0.0
    for t in range(T):
        u = n - 1 - t
        if not 0 <= u <= U:
            continue
        if t < T - 1:
            total += np.exp(ab.alpha[t, u] + z[t, u, blank] + ab.beta[t + 1, u] - logp)
        elif u == U:
            total += np.exp(ab.alpha[t, u] + z[t, u, blank] - logp)
        if u < U:
            total += np.exp(ab.alpha[t, u] + z[t, u, y[u]] + ab.beta[t, u + 1] - logp)
    return float(total)


# -- differentiable bridge ----------------------------------------------------


def transducer_nll(z: Tensor, labels, blank: int = 0, validate: bool = True) -> Tensor:
    """Autograd node wrapping the lattice loss; input is (T, U+1, K) log-probs."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    lat = Lattice(log_probs=z.data.astype(np.float64), labels=labels, blank=blank)
    loss, grad = rnnt_loss(lat, validate=validate)

    def bwd(g):
        from .tensor import _accum  # local import to keep the public surface small
        _accum(z, (g * grad).astype(z.data.dtype))

    return from_op(np.float64(loss), (z,), bwd)


class JointNetwork:
    """Feed-forward combiner: tanh(enc @ We + pred @ Wp + b) @ Wo + bo.

    Produces the (T, U+1, K) log-probability lattice from per-frame encoder
    outputs and per-label-step prediction outputs.
    """

    def __init__(self, enc_dim: int, pred_dim: int, hidden: int, n_classes: int,
                 rng: np.random.Generator, init_scale: float = 0.05):
        def u(shape):
            return Tensor(rng.uniform(-init_scale, init_scale, shape), requires_grad=True)

        self.w_enc = u((enc_dim, hidden))
        self.w_pred = u((pred_dim, hidden))
        self.b = u((hidden,))
        self.w_out = u((hidden, n_classes))
        self.b_out = u((n_classes,))
        self.hidden = hidden
        self.n_classes = n_classes

    def parameters(self) -> dict[str, Tensor]:
        return {"joint.w_enc": self.w_enc, "joint.w_pred": self.w_pred,
                "joint.b": self.b, "joint.w_out": self.w_out, "joint.b_out": self.b_out}

    def log_prob_lattice(self, h_enc: Tensor, h_pred: Tensor) -> Tensor:
        """(T, He) x (U+1, Hp) -> (T, U+1, K) normalized log-probabilities."""
        proj = pairwise_sum(h_enc @ self.w_enc, h_pred @ self.w_pred)
        hidden = (proj + self.b).tanh()
        T, U1 = hidden.shape[0], hidden.shape[1]
        logits = hidden.reshape(T * U1, self.hidden) @ self.w_out + self.b_out
        return log_softmax(logits, axis=-1).reshape(T, U1, self.n_classes)

    def step_log_probs(self, h_enc_t: np.ndarray, h_pred_u: np.ndarray,
                       temperature: float = 1.0) -> np.ndarray:
        """Single-node log-probs for decoding, with softmax temperature."""
        hidden = np.tanh(h_enc_t @ self.w_enc.data + h_pred_u @ self.w_pred.data
                         + self.b.data)
        logits = (hidden @ self.w_out.data + self.b_out.data) / temperature
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())
