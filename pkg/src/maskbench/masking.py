"""Additive attention masks for every training recipe.

A mask is an L x L bias added to attention logits: 0 means visible,
:data:`~maskbench.tensor.BLOCKED` means invisible and a finite negative value
``log w`` attenuates the entry by a factor ``w``. All recipes here keep the
lower triangle (including the diagonal) at 0 and only vary what a token may
see *ahead* of itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import BLOCKED, Tensor, linear, gelu, log_sigmoid, mul, reshape, _sigmoid

STRATEGIES = (
    "causal",
    "hybrid_block",
    "hybrid_soft",
    "hybrid_mlp",
    "hybrid_gq",
    "bidirectional",
    "scheduler_linear",
    "scheduler_cosine",
    "ggsm",
)

#: Strategies whose deployed encoder runs with a fully open mask.
BIDIRECTIONAL_FAMILY = ("bidirectional", "scheduler_linear", "scheduler_cosine", "ggsm")


class ScheduleError(RuntimeError):
    """The schedule state cannot produce the requested mask."""


def check_strategy(tag: str) -> str:
    if tag not in STRATEGIES:
        raise ValueError(f"unknown strategy {tag!r}; valid tags: {', '.join(STRATEGIES)}")
    return tag


@dataclass
class AttentionMask:
    bias: np.ndarray

    @property
    def dim(self) -> int:
        return self.bias.shape[0]

    def validate(self) -> None:
        b = self.bias
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise ValueError(f"mask must be square, got {b.shape}")
        if np.any(np.tril(b) != 0.0):
            raise ValueError("lower triangle and diagonal must be 0")
        finite = b[b != BLOCKED]
        if np.any(finite > 0.0) or not np.all(np.isfinite(finite)):
            raise ValueError("finite entries must be <= 0")

    def upper_mean(self) -> float:
        """Mean bias over strict-upper entries (``-inf`` if any is blocked)."""
        iu = np.triu_indices(self.dim, k=1)
        return float(self.bias[iu].mean()) if iu[0].size else 0.0

    def upper_visibility(self) -> float:
        """Mean attenuation factor ``w`` over strict-upper entries (blocked = 0)."""
        iu = np.triu_indices(self.dim, k=1)
        return float(np.exp(self.bias[iu]).mean()) if iu[0].size else 1.0

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.bias, other.bias)


def _check_len(L: int) -> None:
    if L < 1:
        raise ValueError(f"mask length must be >= 1, got {L}")


def causal_mask(L: int) -> AttentionMask:
    _check_len(L)
    bias = np.zeros((L, L))
    bias[np.triu_indices(L, k=1)] = BLOCKED
    return AttentionMask(bias)


def bidirectional_mask(L: int) -> AttentionMask:
    _check_len(L)
    return AttentionMask(np.zeros((L, L)))


def block_hybrid_mask(L: int, user_end: int) -> AttentionMask:
    """Bidirectional inside positions ``0..user_end``, causal elsewhere."""
    _check_len(L)
    if not 0 <= user_end < L:
        raise IndexError(f"user_end={user_end} outside [0, {L})")
    m = causal_mask(L)
    m.bias[: user_end + 1, : user_end + 1] = 0.0
    return m


def column_soft_mask(L: int, weights: np.ndarray) -> AttentionMask:
    """Upper entries ``log w_j`` for column ``j``; lower triangle 0."""
    w = np.asarray(weights, dtype=np.float64)[:L]
    if w.shape[0] < L:
        raise ScheduleError(f"need {L} column weights, got {w.shape[0]}")
    bias = np.zeros((L, L))
    iu = np.triu_indices(L, k=1)
    bias[iu] = np.log(w)[iu[1]]
    return AttentionMask(bias)


def visibility(norms: np.ndarray, norm_scale: float = 1.0) -> np.ndarray:
    """Future-token visibility ``sigma(norm_scale * ||grad h_j||)``."""
    return _sigmoid(norm_scale * np.asarray(norms, dtype=np.float64))


def alpha(t: int, T_warm: int, T_total: int) -> float:
    """Interpolation weight toward full visibility; 0 before warm-up ends, capped at 1."""
    if t < T_warm:
        return 0.0
    return min(1.0, (t - T_warm) / (T_total - T_warm))


@dataclass
class MaskScheduleState:
    strategy: str
    T_warm: int
    T_total: int
    t: int = 0
    frozen_norms: np.ndarray | None = None
    lagged_norms: np.ndarray | None = None
    norm_scale: float = 1.0

    def __post_init__(self):
        check_strategy(self.strategy)
        if not 0 <= self.T_warm < self.T_total:
            raise ScheduleError(f"need 0 <= T_warm < T_total, got {self.T_warm}, {self.T_total}")

    @property
    def alpha(self) -> float:
        if self.strategy != "ggsm":
            return 0.0
        return alpha(self.t, self.T_warm, self.T_total)

    def freeze_warmup_norms(self, batch_norms, max_len: int) -> np.ndarray:
        if self.frozen_norms is not None:
            raise ScheduleError("warm-up norms already frozen")
        self.frozen_norms = position_means(batch_norms, max_len)
        return self.frozen_norms

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "T_warm": self.T_warm,
            "T_total": self.T_total,
            "t": self.t,
            "norm_scale": self.norm_scale,
            "frozen_norms": None if self.frozen_norms is None else self.frozen_norms.tolist(),
            "lagged_norms": None if self.lagged_norms is None else self.lagged_norms.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskScheduleState":
        s = cls(d["strategy"], d["T_warm"], d["T_total"], d["t"], norm_scale=d["norm_scale"])
        if d["frozen_norms"] is not None:
            s.frozen_norms = np.asarray(d["frozen_norms"], dtype=np.float64)
        if d["lagged_norms"] is not None:
            s.lagged_norms = np.asarray(d["lagged_norms"], dtype=np.float64)
        return s


def position_means(batch_norms, max_len: int) -> np.ndarray:
    """Per-position mean over the sequences long enough to cover it.

    Positions no sequence reaches get the mean of all observed entries.
    """
    batch_norms = [np.asarray(v, dtype=np.float64) for v in batch_norms]
    if not batch_norms:
        raise ScheduleError("cannot aggregate norms of an empty batch")
    total = np.zeros(max_len)
    count = np.zeros(max_len)
    for v in batch_norms:
        n = min(len(v), max_len)
        total[:n] += v[:n]
        count[:n] += 1
    seen = count > 0
    out = np.empty(max_len)
    out[seen] = total[seen] / count[seen]
    out[~seen] = total[seen].sum() / count[seen].sum() if seen.any() else 0.0
    return out


def freeze_warmup_norms(state: MaskScheduleState, batch_norms, max_len: int) -> np.ndarray:
    return state.freeze_warmup_norms(batch_norms, max_len)


def soft_hybrid_mask(L: int, lagged_norms: np.ndarray, norm_scale: float = 1.0) -> AttentionMask:
    _check_len(L)
    if lagged_norms is None:
        raise ScheduleError("soft mask needs gradient norms from a previous pass")
    return column_soft_mask(L, visibility(lagged_norms[:L], norm_scale))


def ggsm_mask(L: int, state: MaskScheduleState) -> AttentionMask:
    """Gradient-guided soft mask: lagged norms during warm-up, then anneal to open."""
    _check_len(L)
    t = state.t
    if t >= state.T_total:
        return bidirectional_mask(L)
    if t < state.T_warm:
        if state.lagged_norms is None:
            raise ScheduleError(f"step {t} is in warm-up but no lagged norms are available")
        return column_soft_mask(L, visibility(state.lagged_norms[:L], state.norm_scale))
    if state.frozen_norms is None:
        raise ScheduleError(f"step {t} is past warm-up but norms were never frozen")
    a = alpha(t, state.T_warm, state.T_total)
    w = (1.0 - a) * visibility(state.frozen_norms[:L], state.norm_scale) + a
    return column_soft_mask(L, w)


def span_delta(L: int, epoch: int, schedule: str, epochs_total: int) -> int:
    if epochs_total < 1:
        raise ValueError("epochs_total must be >= 1")
    frac = min(max(epoch / epochs_total, 0.0), 1.0)
    if schedule == "linear":
        x = L * frac
    elif schedule == "cosine":
        x = L * (1.0 - math.cos(math.pi * frac)) / 2.0
    else:
        raise ValueError(f"unknown schedule {schedule!r}")
    return int(math.floor(x + 0.5))


def span_scheduler_mask(L: int, epoch: int, schedule: str, epochs_total: int) -> AttentionMask:
    """Row ``i`` sees positions up to ``min(i + delta, L - 1)``."""
    _check_len(L)
    delta = span_delta(L, epoch, schedule, epochs_total)
    i = np.arange(L)[:, None]
    j = np.arange(L)[None, :]
    return AttentionMask(np.where(j <= np.minimum(i + delta, L - 1), 0.0, BLOCKED))


def global_query_mask(L: int) -> tuple[AttentionMask, bool]:
    """Mask for a sequence with a global token prepended at position 0."""
    _check_len(L)
    m = causal_mask(L + 1)
    m.bias[0, :] = 0.0
    m.bias[:, 0] = 0.0
    return m, True


class GateMLP:
    """Two-layer gate ``d -> d -> 1`` predicting how far row ``i`` may look ahead."""

    def __init__(self, d_model: int, rng: np.random.Generator, std: float = 0.02):
        self.w1 = Tensor(rng.normal(0.0, std, (d_model, d_model)), requires_grad=True, name="gate.w1")
        self.b1 = Tensor(np.zeros(d_model), requires_grad=True, name="gate.b1")
        self.w2 = Tensor(rng.normal(0.0, std, (d_model, 1)), requires_grad=True, name="gate.w2")
        self.b2 = Tensor(np.zeros(1), requires_grad=True, name="gate.b2")

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        """Gate logits, shape ``x.shape[:-1]``."""
        h = gelu(linear(x, self.w1, self.b1))
        out = linear(h, self.w2, self.b2)
        return reshape(out, out.shape[:-1])


def mlp_gate_mask(L: int, token_embeddings: Tensor, gate: GateMLP) -> Tensor:
    """Differentiable bias: row ``i`` gets ``log sigma(gate(e_i))`` at every ``j > i``.

    ``token_embeddings`` has shape ``(..., L, d)``; the result is ``(..., L, L)``.
    """
    _check_len(L)
    if token_embeddings.shape[-2] != L:
        raise ValueError(f"expected {L} embeddings, got shape {token_embeddings.shape}")
    ls = log_sigmoid(gate(token_embeddings))
    ls = reshape(ls, ls.shape + (1,))
    upper = np.triu(np.ones((L, L)), k=1)
    return mul(ls, upper)
