"""Dual-tower InfoNCE with same-side negatives and false-negative masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    DegenerateError,
    NumericError,
    Tensor,
    as_tensor,
    concat,
    masked_logsumexp,
    matmul,
    mean,
    mul,
    take,
    transpose,
)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.05
    margin: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        # negative margins are allowed for degenerate checks; NaN never is
        if math.isnan(self.margin):
            raise ValueError("margin must not be NaN")


@dataclass
class SimilarityBundle:
    """Cosine similarities within one batch: user-answer, user-user, answer-answer."""

    s_ua: Tensor
    s_uu: Tensor
    s_aa: Tensor

    @classmethod
    def from_embeddings(cls, users: Tensor, answers: Tensor) -> "SimilarityBundle":
        """Build from row-normalised ``(B, d)`` embedding matrices."""
        return cls(
            matmul(users, transpose(answers)),
            matmul(users, transpose(users)),
            matmul(answers, transpose(answers)),
        )


@dataclass
class LossBreakdown:
    total: Tensor
    per_example: np.ndarray
    masked_negatives: int


def cosine_sim(v1, v2) -> float:
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = math.sqrt(float(v1 @ v1))
    n2 = math.sqrt(float(v2 @ v2))
    if n1 == 0.0 or n2 == 0.0:
        raise DegenerateError("cosine similarity of a zero vector")
    return float(v1 @ v2) / (n1 * n2)


def mask_factor(s_ij, s_pos, c_margin):
    """1 keeps a negative, 0 drops it as a likely false negative.

    Works elementwise on arrays; strict inequality, so equality keeps it.
    """
    out = np.where(np.asarray(s_ij) > np.asarray(s_pos) + c_margin, 0, 1)
    return int(out) if out.ndim == 0 else out


def info_nce(sims: SimilarityBundle, cfg: LossConfig) -> LossBreakdown:
    s_ua, s_uu, s_aa = (as_tensor(s) for s in (sims.s_ua, sims.s_uu, sims.s_aa))
    B = s_ua.shape[0]
    for name, s in (("s_ua", s_ua), ("s_uu", s_uu), ("s_aa", s_aa)):
        if s.shape != (B, B):
            raise ValueError(f"{name} must be {B}x{B}, got {s.shape}")
        if not np.all(np.isfinite(s.data)):
            raise NumericError(f"non-finite similarity in {name}")

    pos = np.diag(s_ua.data)[:, None]
    off = ~np.eye(B, dtype=bool)
    keep_ua = off & (mask_factor(s_ua.data, pos, cfg.margin) == 1)
    keep_uu = off & (mask_factor(s_uu.data, pos, cfg.margin) == 1)
    keep_aa = off & (mask_factor(s_aa.data, pos, cfg.margin) == 1)
    masked = int((off & ~keep_ua).sum() + (off & ~keep_uu).sum() + (off & ~keep_aa).sum())
    keep_ua = keep_ua | ~off  # the positive is always in Z_i

    logits = mul(concat([s_ua, s_uu, s_aa], axis=1), 1.0 / cfg.temperature)
    keep = np.concatenate([keep_ua, keep_uu, keep_aa], axis=1)
    lse = masked_logsumexp(logits, keep, axis=1)
    idx = np.arange(B)
    positive = take(logits, (idx, idx))
    per = lse - positive
    return LossBreakdown(mean(per), per.data.copy(), masked)
