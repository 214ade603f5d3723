"""Glue between strategy tags, mask builders and the encoder towers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder, HiddenStates, TokenSequence, extract_embeddings
from .masking import (
    BIDIRECTIONAL_FAMILY,
    AttentionMask,
    MaskScheduleState,
    bidirectional_mask,
    block_hybrid_mask,
    causal_mask,
    ggsm_mask,
    global_query_mask,
    mlp_gate_mask,
    soft_hybrid_mask,
    span_scheduler_mask,
)
from .tensor import Tensor

USER_TOWER, ANSWER_TOWER = "user", "answer"


@dataclass
class TowerOutput:
    embeddings: Tensor
    hidden: HiddenStates
    masks: list[AttentionMask]
    gate_bias: Tensor | None

    def upper_stats(self) -> tuple[float, float]:
        """Batch mean of (upper-triangle bias, upper-triangle visibility)."""
        biases, vis = [], []
        for b, m in enumerate(self.masks):
            bias = m.bias
            if self.gate_bias is not None:
                n = bias.shape[0]
                bias = bias + self.gate_bias.data[b, :n, :n]
            full = AttentionMask(bias)
            biases.append(full.upper_mean())
            vis.append(full.upper_visibility())
        return float(np.mean(biases)), float(np.mean(vis))


def uses_global_token(strategy: str) -> bool:
    return strategy == "hybrid_gq"


def _one_mask(strategy: str, L: int, seq: TokenSequence, tower: str, state: MaskScheduleState, phase: str, offset: int):
    if strategy == "causal":
        return causal_mask(L)
    if phase == "eval" and strategy in BIDIRECTIONAL_FAMILY:
        return bidirectional_mask(L)
    if phase == "seed":
        return causal_mask(L)
    if strategy == "bidirectional":
        return bidirectional_mask(L)
    if strategy == "hybrid_block":
        if tower == USER_TOWER:
            return block_hybrid_mask(L, offset + seq.segment_end)
        return causal_mask(L)
    if strategy == "hybrid_soft":
        return soft_hybrid_mask(L, state.lagged_norms, state.norm_scale)
    if strategy == "hybrid_mlp":
        return bidirectional_mask(L)  # the gate supplies the future bias
    if strategy in ("scheduler_linear", "scheduler_cosine"):
        return span_scheduler_mask(L, state.t, strategy.split("_")[1], state.T_total)
    if strategy == "ggsm":
        return ggsm_mask(L, state)
    raise ValueError(f"no mask rule for strategy {strategy!r}")


def tower_forward(
    encoder: Encoder,
    seqs: Sequence[TokenSequence],
    tower: str,
    strategy: str,
    state: MaskScheduleState,
    phase: str = "train",
) -> TowerOutput:
    """Mask, encode and pool one tower.

    ``phase`` is ``"train"``, ``"seed"`` (pure causal pass that initialises
    gradient norms) or ``"eval"`` (the deployed inference mask).
    """
    prefix = tower == USER_TOWER and encoder.cfg.use_prefix
    gq = uses_global_token(strategy) and phase != "seed"
    x, lengths = encoder.input_embeddings(seqs, prefix, gq)
    offset = encoder.offset(prefix, False)
    masks = []
    for seq, n in zip(seqs, lengths):
        if gq:
            m, _ = global_query_mask(int(n) - 1)
        else:
            m = _one_mask(strategy, int(n), seq, tower, state, phase, offset)
        masks.append(m)
    gate_bias = None
    if strategy == "hybrid_mlp" and phase != "seed":
        gate_bias = mlp_gate_mask(x.shape[1], x, encoder.params.gate)
    hidden = encoder.forward_batch(seqs, masks, gate_bias=gate_bias, inputs=(x, lengths), prefix=prefix, global_token=gq)
    anchors = [s.user_pos if tower == USER_TOWER else s.eos_pos for s in seqs]
    return TowerOutput(extract_embeddings(hidden, anchors), hidden, masks, gate_bias)


def sequence_norms(hidden: HiddenStates) -> list[np.ndarray]:
    """Per-sequence gradient norms over real positions of a tower's final states."""
    norms = T.hidden_grad_norms(hidden.final)
    return [norms[b, : int(n)] for b, n in enumerate(hidden.lengths)]
