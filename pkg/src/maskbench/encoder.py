"""Tiny pre-norm decoder-style transformer used as a dual-tower encoder.

The attention of every layer consumes an arbitrary additive mask, so the same
backbone serves every masking recipe. Both towers share the parameters; they
differ only in their input (rendered user template vs. answer text) and in
the anchor whose final hidden state becomes the embedding (``<USER>`` or
``<EOS>``).

Sequences of different length are batched by right-padding; pad columns are
blocked in the mask so real positions never see them.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .masking import AttentionMask, GateMLP
from .synthdata import EVENT_MODALITIES, MODALITIES, UserRecord, event_vocabulary, render_user_text
from .tensor import BLOCKED, Tensor

PAD, UNK, USER, EOS, INSTRUCTION = "<PAD>", "<UNK>", "<USER>", "<EOS>", "instruction:"
SPECIALS = (PAD, UNK, USER, EOS, INSTRUCTION)
DELIMITERS = tuple(d for m in MODALITIES for d in (f"<{m}>", f"</{m}>"))
N_MODALITIES = len(MODALITIES)


class Vocab:
    """Closed word-level vocabulary: one id per event string or template word."""

    def __init__(self, words: Sequence[str]):
        self.tokens = list(SPECIALS) + list(DELIMITERS) + [w for w in words if w not in SPECIALS + DELIMITERS]
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @classmethod
    def default(cls, n_features: int = 4) -> "Vocab":
        return cls(event_vocabulary(n_features))

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, tok: str) -> int:
        return self.ids.get(tok, self.ids[UNK])

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self[w] for w in words]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class TokenSequence:
    tokens: np.ndarray
    user_pos: int | None = None
    eos_pos: int | None = None
    modality_spans: list[tuple[int, int, int]] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def segment_end(self) -> int:
        """Index of the last token of the modality blocks (``</tabular>``)."""
        if not self.modality_spans:
            return 0
        return self.modality_spans[-1][2]

    def payload(self, modality: int) -> np.ndarray:
        """Token ids strictly inside the delimiters of one modality."""
        for m, start, end in self.modality_spans:
            if m == modality:
                return self.tokens[start + 1 : end]
        return self.tokens[:0]


class RenderError(ValueError):
    pass


def split_user_text(text: str) -> dict[str, list[str]]:
    """Recover the per-modality payload words from delimited history text."""
    words = text.split()
    out: dict[str, list[str]] = {}
    i = 0
    for m in MODALITIES:
        if i >= len(words) or words[i] != f"<{m}>":
            raise RenderError(f"expected <{m}> at word {i}")
        try:
            j = words.index(f"</{m}>", i + 1)
        except ValueError:
            raise RenderError(f"missing </{m}>") from None
        out[m] = words[i + 1 : j]
        i = j + 1
    if i != len(words):
        raise RenderError("trailing words after </tabular>")
    return out


def render_template(
    user: UserRecord | str,
    query: str | None,
    vocab: Vocab,
    max_len: int = 128,
) -> TokenSequence:
    """Render ``history + [instruction: query] + <USER>`` as token ids.

    Over-long inputs lose their oldest events first, always from the modality
    that currently holds the most events.
    """
    text = render_user_text(user) if isinstance(user, UserRecord) else user
    payload = {m: list(w) for m, w in split_user_text(text).items()}
    tail = ([INSTRUCTION] + query.split()) if query else []
    fixed = 2 * N_MODALITIES + len(tail) + 1
    if fixed > max_len:
        raise RenderError(f"template skeleton needs {fixed} tokens, max_len is {max_len}")
    truncated = False
    while fixed + sum(len(w) for w in payload.values()) > max_len:
        longest = max(MODALITIES, key=lambda m: len(payload[m]))
        payload[longest].pop(0)
        truncated = True
    words: list[str] = []
    spans = []
    for k, m in enumerate(MODALITIES):
        start = len(words)
        words.append(f"<{m}>")
        words.extend(payload[m])
        words.append(f"</{m}>")
        spans.append((k, start, len(words) - 1))
    words.extend(tail)
    words.append(USER)
    return TokenSequence(
        np.asarray(vocab.encode(words), dtype=np.int64),
        user_pos=len(words) - 1,
        modality_spans=spans,
        truncated=truncated,
    )


def render_answer(answer: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    words = answer.split()
    if not words:
        raise RenderError("answer is empty")
    truncated = len(words) + 1 > max_len
    if truncated:
        words = words[: max_len - 1]
    words.append(EOS)
    return TokenSequence(np.asarray(vocab.encode(words), dtype=np.int64), eos_pos=len(words) - 1, truncated=truncated)


def render_user_side(text: str, vocab: Vocab, max_len: int = 128) -> TokenSequence:
    """Render ``user_text [instruction: query]`` as produced by ``PairRecord.user_side_text``."""
    head, sep, query = text.partition(f" {INSTRUCTION} ")
    return render_template(head, query if sep else None, vocab, max_len)


# ---------------------------------------------------------------- parameters


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    n_modalities: int = N_MODALITIES
    seed: int = 0
    init_std: float = 0.125
    emb_std: float = 1.0
    resid_std: float | None = 0.005
    use_prefix: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.n_modalities != N_MODALITIES:
            raise ValueError(f"n_modalities is fixed at {N_MODALITIES}")

    @property
    def max_positions(self) -> int:
        # modality prefix rows plus an optional global token
        return self.max_len + self.n_modalities + 1


class ModelParams:
    """Named trainable tensors of the encoder, created from ``cfg.seed``."""

    def __init__(self, cfg: EncoderConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, V, M, s = cfg.d_model, cfg.vocab_size, cfg.n_modalities, cfg.init_std
        self.tensors: dict[str, Tensor] = {}

        def add(name, arr):
            self.tensors[name] = Tensor(arr, requires_grad=True, name=name)

        e = cfg.emb_std
        # output projections of the residual branches; small values keep the
        # untrained encoder close to its token-plus-position input
        r = s if cfg.resid_std is None else cfg.resid_std
        add("tok_emb", rng.normal(0.0, e, (V, d)))
        add("mod_emb", rng.normal(0.0, e, (V, d)))
        add("mod_null", rng.normal(0.0, e, (M, d)))
        add("adapter_w", rng.normal(0.0, s, (M, d, d)))
        add("adapter_b", np.zeros((M, 1, d)))
        add("global_tok", rng.normal(0.0, e, (1, 1, d)))
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            add(p + "ln1_g", np.ones(d))
            add(p + "ln1_b", np.zeros(d))
            add(p + "w_qkv", rng.normal(0.0, s, (d, 3 * d)))
            add(p + "b_qkv", np.zeros(3 * d))
            add(p + "w_o", rng.normal(0.0, r, (d, d)))
            add(p + "b_o", np.zeros(d))
            add(p + "ln2_g", np.ones(d))
            add(p + "ln2_b", np.zeros(d))
            add(p + "w_ff1", rng.normal(0.0, s, (d, cfg.d_ff)))
            add(p + "b_ff1", np.zeros(cfg.d_ff))
            add(p + "w_ff2", rng.normal(0.0, r, (cfg.d_ff, d)))
            add(p + "b_ff2", np.zeros(d))
        add("lnf_g", np.ones(d))
        add("lnf_b", np.zeros(d))
        self.gate = GateMLP(d, rng, std=s)
        for t in self.gate.parameters():
            self.tensors[t.name] = t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.tensors.items())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.tensors.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arrays[k].shape} vs {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


@dataclass
class HiddenStates:
    """Final-layer states ``(B, L, d)``; ``lengths`` counts real positions per row."""

    final: Tensor
    lengths: np.ndarray
    offset: int

    def valid(self) -> np.ndarray:
        L = self.final.shape[-2]
        return np.arange(L)[None, :] < self.lengths[:, None]


def encode_modality_prefix(seqs: Sequence[TokenSequence], params: ModelParams) -> Tensor:
    """One adapter-projected vector per modality and sequence, shape ``(B, 6, d)``.

    Each modality's payload embeddings are mean-pooled; an empty modality
    uses that modality's learned null vector instead.
    """
    B, M = len(seqs), params.cfg.n_modalities
    ids: list[int] = []
    pool_rows, pool_cols, pool_vals = [], [], []
    empty = np.zeros((B * M, M))
    for b, seq in enumerate(seqs):
        for m in range(M):
            payload = seq.payload(m)
            row = b * M + m
            if len(payload) == 0:
                empty[row, m] = 1.0
                continue
            for tok in payload:
                pool_rows.append(row)
                pool_cols.append(len(ids))
                pool_vals.append(1.0 / len(payload))
                ids.append(int(tok))
    pooled = T.matmul(Tensor(empty), params["mod_null"])
    if ids:
        pool = np.zeros((B * M, len(ids)))
        pool[pool_rows, pool_cols] = pool_vals
        pooled = pooled + T.matmul(Tensor(pool), T.embedding(params["mod_emb"], ids))
    x = T.transpose(T.reshape(pooled, (B, M, -1)), (1, 0, 2))
    x = T.matmul(x, params["adapter_w"]) + params["adapter_b"]
    return T.transpose(x, (1, 0, 2))


def _stack_bias(masks, lengths: np.ndarray, L: int) -> np.ndarray:
    """Pad per-sequence masks into ``(B, L, L)``, blocking pad columns."""
    B = len(lengths)
    out = np.full((B, L, L), BLOCKED)
    for b, m in enumerate(masks):
        n = int(lengths[b])
        bias = m.bias if isinstance(m, AttentionMask) else np.asarray(m)
        if bias.shape != (n, n):
            raise T.TensorError(f"mask for sequence {b} is {bias.shape}, sequence length is {n}")
        out[b, :n, :n] = bias
        idx = np.arange(n, L)
        out[b, idx, idx] = 0.0
    return out


class Encoder:
    def __init__(self, cfg: EncoderConfig, params: ModelParams | None = None):
        self.cfg = cfg
        self.params = params or ModelParams(cfg)
        self._pe = sinusoidal_positions(cfg.max_positions, cfg.d_model)

    def offset(self, prefix: bool, global_token: bool) -> int:
        return (self.cfg.n_modalities if prefix else 0) + (1 if global_token else 0)

    def input_embeddings(
        self, seqs: Sequence[TokenSequence], prefix: bool, global_token: bool = False
    ) -> tuple[Tensor, np.ndarray]:
        """Layer-0 input ``(B, L, d)`` and the real length of each row."""
        p = self.params
        B = len(seqs)
        n_tok = np.array([len(s) for s in seqs])
        if n_tok.max() > self.cfg.max_len:
            raise T.TensorError(f"sequence of length {n_tok.max()} exceeds max_len={self.cfg.max_len}")
        Lt = int(n_tok.max())
        ids = np.zeros((B, Lt), dtype=np.int64)
        for b, s in enumerate(seqs):
            ids[b, : len(s)] = s.tokens
        x = T.embedding(p["tok_emb"], ids)
        parts = []
        if global_token:
            parts.append(p["global_tok"] + Tensor(np.zeros((B, 1, self.cfg.d_model))))
        if prefix:
            parts.append(encode_modality_prefix(seqs, p))
        if parts:
            x = T.concat(parts + [x], axis=1)
        L = x.shape[1]
        return x + Tensor(self._pe[:L]), n_tok + self.offset(prefix, global_token)

    def forward_batch(
        self,
        seqs: Sequence[TokenSequence],
        masks,
        prefix: bool = False,
        global_token: bool = False,
        gate_bias: Tensor | None = None,
        inputs: tuple[Tensor, np.ndarray] | None = None,
    ) -> HiddenStates:
        """Run the stack on a padded batch.

        ``masks`` holds one ``AttentionMask`` (or bias array) per sequence,
        sized to include prefix rows and the global token. ``gate_bias`` is an
        optional differentiable ``(B, L, L)`` bias added on top.
        """
        cfg, p = self.cfg, self.params
        x, lengths = inputs if inputs is not None else self.input_embeddings(seqs, prefix, global_token)
        B, L, d = x.shape
        bias = _stack_bias(masks, lengths, L)
        mask: Tensor | np.ndarray = bias[:, None]
        if gate_bias is not None:
            mask = T.reshape(T.add(gate_bias, Tensor(bias)), (B, 1, L, L))
        H, dh = cfg.n_heads, d // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)
        h = x
        for i in range(cfg.n_layers):
            pre = f"layer{i}."
            a = T.layer_norm(h, p[pre + "ln1_g"], p[pre + "ln1_b"])
            qkv = T.linear(a, p[pre + "w_qkv"], p[pre + "b_qkv"])
            qkv = T.transpose(T.reshape(qkv, (B, L, 3, H, dh)), (2, 0, 3, 1, 4))
            q, k, v = qkv[0], qkv[1], qkv[2]
            logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale)
            att = T.masked_softmax(logits, mask)
            o = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
            h = h + T.linear(o, p[pre + "w_o"], p[pre + "b_o"])
            f = T.layer_norm(h, p[pre + "ln2_g"], p[pre + "ln2_b"])
            f = T.linear(T.gelu(T.linear(f, p[pre + "w_ff1"], p[pre + "b_ff1"])), p[pre + "w_ff2"], p[pre + "b_ff2"])
            h = h + f
        final = T.layer_norm(h, p["lnf_g"], p["lnf_b"]).retain_grad()
        return HiddenStates(final, lengths, self.offset(prefix, global_token))

    def forward(
        self,
        seq: TokenSequence,
        mask: AttentionMask,
        prefix: bool = False,
        global_token: bool = False,
    ) -> HiddenStates:
        return self.forward_batch([seq], [mask], prefix=prefix, global_token=global_token)


def extract_embeddings(h: HiddenStates, anchors: Sequence[int]) -> Tensor:
    """L2-normalised hidden states at token-level ``anchors`` (offset applied), ``(B, d)``."""
    anchors = np.asarray(anchors, dtype=np.int64) + h.offset
    if np.any(anchors < h.offset) or np.any(anchors >= h.lengths):
        raise IndexError(f"anchor out of range: {anchors - h.offset}")
    B = h.final.shape[0]
    return T.l2_normalize(T.take(h.final, (np.arange(B), anchors)))


def extract_embedding(h: HiddenStates, anchor: int, row: int = 0) -> np.ndarray:
    """Unit-norm embedding of a single sequence at a token-level anchor."""
    final = h.final.data[row]
    pos = anchor + h.offset
    if not h.offset <= pos < h.lengths[row]:
        raise IndexError(f"anchor {anchor} out of range")
    v = final[pos]
    n = float(np.sqrt(v @ v))
    if n == 0.0:
        raise T.DegenerateError("zero-norm hidden state at anchor")
    return v / n
