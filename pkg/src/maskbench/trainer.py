"""Dual-tower contrastive training with per-strategy attention masks.

One step renders both towers of a batch through the shared encoder, pools the
``<USER>``/``<EOS>`` anchors, applies InfoNCE and updates with AdamW. For the
gradient-guided recipes the user tower's final hidden-state gradient norms
are kept after every backward pass; they shape the next step's mask (one-step
lag) and, for ``ggsm``, are frozen at the last warm-up step.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .contrastive import LossBreakdown, LossConfig, SimilarityBundle, info_nce
from .encoder import Encoder, EncoderConfig, ModelParams, TokenSequence, Vocab, render_answer, render_template
from .masking import MaskScheduleState, ScheduleError, check_strategy, position_means
from .recipes import ANSWER_TOWER, USER_TOWER, sequence_norms, tower_forward
from .synthdata import PairRecord, builtin_pairs, read_corpus

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("step", "loss", "alpha_t", "mean_upper_bias", "upper_visibility", "lr")
GRADIENT_GUIDED = ("ggsm", "hybrid_soft")


class NumericFailure(ArithmeticError):
    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "ggsm"
    batch_size: int = 32
    steps: int = 2000
    warmup: int = 200
    lr: float = 3e-3
    lr_schedule: str = "cosine"
    temperature: float = 0.05
    margin: float = 0.1
    weight_decay: float = 0.01
    norm_scale: float = 1.0
    seed: int = 7
    corpus: str | None = None
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 128
    n_features: int = 4
    init_std: float = 0.125
    emb_std: float = 1.0
    resid_std: float | None = 0.005
    lr_warmup: int = 0

    def __post_init__(self):
        check_strategy(self.strategy)
        if self.strategy == "ggsm" and not 0 <= self.warmup < self.steps:
            raise ValueError(f"ggsm needs 0 <= warmup < steps, got warmup={self.warmup}, steps={self.steps}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            d_ff=self.d_ff,
            max_len=self.max_len,
            seed=self.seed,
            init_std=self.init_std,
            emb_std=self.emb_std,
            resid_std=self.resid_std,
        )

    def lr_at(self, t: int) -> float:
        ramp = min(1.0, (t + 1) / self.lr_warmup) if self.lr_warmup else 1.0
        if self.lr_schedule == "constant":
            return self.lr * ramp
        return ramp * self.lr * 0.5 * (1.0 + math.cos(math.pi * min(t, self.steps) / self.steps))

    def hash(self, exclude: Sequence[str] = ()) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class AdamW:
    def __init__(self, params: ModelParams, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.named()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.named()}

    def step(self, params: ModelParams, lr: float) -> None:
        """Decoupled-decay Adam update; parameters without a gradient are left alone."""
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in params.named():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = p.data - lr * update


@dataclass
class StepLog:
    step: int
    loss: float
    alpha_t: float
    mean_upper_bias: float
    upper_visibility: float
    lr: float

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, c))) for c in LOG_COLUMNS[1:]]


@dataclass
class TrainState:
    t: int
    params: ModelParams
    optimizer: AdamW
    schedule: MaskScheduleState
    log: list[StepLog] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.log]


def _render_pairs(pairs: Sequence[PairRecord], vocab: Vocab, max_len: int):
    users = [render_template(p.user_text, p.query_text, vocab, max_len) for p in pairs]
    answers = [render_answer(p.answer_text, vocab, max_len) for p in pairs]
    return users, answers


class Trainer:
    def __init__(self, cfg: TrainConfig, pairs: Sequence[PairRecord], vocab: Vocab | None = None):
        self.cfg = cfg
        self.pairs = list(pairs)
        if len(self.pairs) < cfg.batch_size:
            raise ValueError(f"corpus has {len(self.pairs)} pairs, fewer than batch size {cfg.batch_size}")
        self.vocab = vocab or Vocab.default(cfg.n_features)
        self.encoder = Encoder(cfg.encoder_config(len(self.vocab)))
        self.loss_cfg = LossConfig(cfg.temperature, cfg.margin, cfg.batch_size)
        self.user_seqs, self.answer_seqs = _render_pairs(self.pairs, self.vocab, cfg.max_len)
        schedule = MaskScheduleState(
            cfg.strategy,
            cfg.warmup if cfg.strategy == "ggsm" else 0,
            cfg.steps,
            norm_scale=cfg.norm_scale,
        )
        self.state = TrainState(
            0,
            self.encoder.params,
            AdamW(self.encoder.params, weight_decay=cfg.weight_decay),
            schedule,
            rng=np.random.default_rng(cfg.seed),
        )
        self.max_positions = self.encoder.cfg.max_positions

    # ------------------------------------------------------------- batching

    @property
    def steps_per_epoch(self) -> int:
        return len(self.pairs) // self.cfg.batch_size

    def batch_indices(self, t: int) -> np.ndarray:
        """Seeded shuffle per epoch; a pure function of the step number."""
        epoch, i = divmod(t, self.steps_per_epoch)
        perm = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.pairs))
        B = self.cfg.batch_size
        return perm[i * B : (i + 1) * B]

    # ------------------------------------------------------------- stepping

    def _forward_loss(self, idx: np.ndarray, phase: str):
        useqs = [self.user_seqs[i] for i in idx]
        aseqs = [self.answer_seqs[i] for i in idx]
        st = self.state.schedule
        users = tower_forward(self.encoder, useqs, USER_TOWER, self.cfg.strategy, st, phase)
        answers = tower_forward(self.encoder, aseqs, ANSWER_TOWER, self.cfg.strategy, st, phase)
        breakdown = info_nce(SimilarityBundle.from_embeddings(users.embeddings, answers.embeddings), self.loss_cfg)
        return users, answers, breakdown

    def seed_pass(self) -> None:
        """Causal forward/backward on the first batch to initialise gradient norms; no update."""
        self.encoder.params.zero_grad()
        with T.Tape():
            users, _, breakdown = self._forward_loss(self.batch_indices(0), "seed")
            T.backward(breakdown.total)
        norms = sequence_norms(users.hidden)
        st = self.state.schedule
        st.lagged_norms = position_means(norms, self.max_positions)
        if self.cfg.strategy == "ggsm" and st.T_warm == 0:
            st.freeze_warmup_norms(norms, self.max_positions)
        self.encoder.params.zero_grad()

    def needs_seed(self) -> bool:
        return self.cfg.strategy in GRADIENT_GUIDED and self.state.schedule.lagged_norms is None

    def train_step(self, idx: np.ndarray | None = None) -> tuple[StepLog, LossBreakdown]:
        state, cfg = self.state, self.cfg
        st = state.schedule
        t = state.t
        st.t = t
        if self.needs_seed():
            self.seed_pass()
        if idx is None:
            idx = self.batch_indices(t)
        lr = cfg.lr_at(t)
        state.params.zero_grad()
        with T.Tape():
            try:
                users, _, breakdown = self._forward_loss(idx, "train")
            except T.NumericError as e:
                raise NumericFailure(f"step {t}: {e}", self._diagnostics(t, lr)) from e
            loss = breakdown.total.item()
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite loss at step {t}", self._diagnostics(t, lr))
            T.backward(breakdown.total)
        grad_ok = all(p.grad is None or np.all(np.isfinite(p.grad)) for p in state.params.parameters())
        if not grad_ok:
            raise NumericFailure(f"non-finite gradient at step {t}", self._diagnostics(t, lr))
        bias_mean, visibility = users.upper_stats()
        alpha_t = st.alpha
        if cfg.strategy in GRADIENT_GUIDED and st.frozen_norms is None:
            norms = sequence_norms(users.hidden)
            st.lagged_norms = position_means(norms, self.max_positions)
            if cfg.strategy == "ggsm" and t == st.T_warm - 1:
                st.freeze_warmup_norms(norms, self.max_positions)
        state.optimizer.step(state.params, lr)
        state.t = t + 1
        st.t = state.t
        entry = StepLog(t, loss, alpha_t, bias_mean, visibility, lr)
        state.log.append(entry)
        return entry, breakdown

    def _diagnostics(self, t: int, lr: float) -> dict:
        norms = {
            k: (None if p.grad is None else float(np.sqrt(np.nansum(p.grad * p.grad))))
            for k, p in self.state.params.named()
        }
        return {"step": t, "lr": lr, "grad_norms": norms}

    def run(
        self,
        until: int | None = None,
        on_step: Callable[[StepLog], None] | None = None,
    ) -> list[StepLog]:
        until = self.cfg.steps if until is None else until
        while self.state.t < until:
            entry, _ = self.train_step()
            if on_step:
                on_step(entry)
        return self.state.log

    # ---------------------------------------------------------- checkpoints

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        st = self.state
        arrays = {}
        for k, p in st.params.named():
            arrays[f"param/{k}"] = p.data
            arrays[f"adam_m/{k}"] = st.optimizer.m[k]
            arrays[f"adam_v/{k}"] = st.optimizer.v[k]
        meta = {
            "version": CHECKPOINT_VERSION,
            "artifact_version": __version__,
            "config": self.cfg.to_dict(),
            "t": st.t,
            "adam_step": st.optimizer.step_count,
            "schedule": st.schedule.to_dict(),
            "log": [asdict(r) for r in st.log],
            "rng": st.rng.bit_generator.state,
        }
        meta["checksum"] = _checksum(meta, arrays)
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def from_checkpoint(cls, path, pairs: Sequence[PairRecord] | None = None, vocab: Vocab | None = None) -> "Trainer":
        meta, arrays = load_checkpoint(path)
        cfg = TrainConfig.from_dict(meta["config"])
        if pairs is None:
            pairs = load_pairs(cfg.corpus)
        tr = cls(cfg, pairs, vocab)
        tr.restore(meta, arrays)
        return tr

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        st = self.state
        st.params.load_arrays({k[len("param/") :]: v for k, v in arrays.items() if k.startswith("param/")})
        for k in st.optimizer.m:
            st.optimizer.m[k] = np.array(arrays[f"adam_m/{k}"])
            st.optimizer.v[k] = np.array(arrays[f"adam_v/{k}"])
        st.optimizer.step_count = meta["adam_step"]
        st.t = meta["t"]
        st.schedule = MaskScheduleState.from_dict(meta["schedule"])
        st.log = [StepLog(**r) for r in meta["log"]]
        st.rng.bit_generator.state = meta["rng"]


def load_pairs(corpus: str | None) -> list[PairRecord]:
    """Read a corpus file, or build the default synthetic corpus when ``corpus`` is empty."""
    return read_corpus(corpus) if corpus else builtin_pairs()


def _checksum(meta: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    body = {k: v for k, v in meta.items() if k != "checksum"}
    h.update(json.dumps(body, sort_keys=True).encode())
    for k in sorted(arrays):
        h.update(k.encode())
        h.update(np.ascontiguousarray(arrays[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    if _checksum(meta, arrays) != meta.get("checksum"):
        raise CheckpointError(f"checksum mismatch in {path}")
    return meta, arrays


def write_loss_log(path, log: Sequence[StepLog]) -> None:
    lines = ["\t".join(LOG_COLUMNS)] + ["\t".join(r.row()) for r in log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_loss_log(path) -> list[dict]:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    head = rows[0].split("\t")
    return [dict(zip(head, (float(x) for x in r.split("\t")))) for r in rows[1:]]


def smoothed(losses: Sequence[float], window: int = 100, at: str = "end") -> float:
    """Mean of the first or last ``window`` losses."""
    arr = np.asarray(losses, dtype=np.float64)
    return float(arr[:window].mean() if at == "start" else arr[-window:].mean())


@dataclass
class RunRecord:
    run_id: str
    config: dict
    loss_log: str
    checkpoint: str
    probe_results: list[dict]
    mean_auc: float | None
    wall_clock_s: float
    artifact_version: str = __version__

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def train(
    cfg: TrainConfig,
    out_dir=None,
    pairs: Sequence[PairRecord] | None = None,
    evaluate: bool = True,
    on_step: Callable[[StepLog], None] | None = None,
) -> tuple[RunRecord, Trainer]:
    """Full run: train, write config/loss log/checkpoint, then probe."""
    from .evalharness import evaluate_all, make_tasks, write_results

    t0 = time.perf_counter()
    if pairs is None:
        pairs = load_pairs(cfg.corpus)
    trainer = Trainer(cfg, pairs)
    trainer.run(on_step=on_step)
    run_id = f"{cfg.strategy}-s{cfg.seed}-{cfg.hash()[:8]}"
    out = Path(out_dir) if out_dir else None
    results = []
    mean = None
    if evaluate:
        n_tasks = len(pairs[0].labels)
        tasks = make_tasks([p.user_id for p in pairs], n_tasks, seed=cfg.seed)
        res, mean = evaluate_all(trainer.encoder, trainer.vocab, pairs, tasks, cfg.strategy, trainer.state.schedule)
        results = [asdict(r) for r in res]
    wall = time.perf_counter() - t0
    loss_path = ckpt_path = ""
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        loss_path = str(out / "loss.tsv")
        write_loss_log(loss_path, trainer.state.log)
        ckpt_path = str(out / "checkpoint.npz")
        trainer.save_checkpoint(ckpt_path)
        if evaluate:
            write_results(out / "probe.tsv", cfg.strategy, res)
    record = RunRecord(run_id, cfg.to_dict(), loss_path, ckpt_path, results, mean, wall)
    if out is not None:
        record.write(out / "run.json")
    return record, trainer
