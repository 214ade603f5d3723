"""Linear probing of frozen user embeddings, scored by ROC AUC."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import Encoder, Vocab, render_answer, render_template, render_user_side
from .masking import MaskScheduleState
from .recipes import ANSWER_TOWER, USER_TOWER, tower_forward
from .synthdata import PairRecord

logger = logging.getLogger(__name__)


class UndefinedAUCError(ValueError):
    pass


def auc(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC, ties counted half.

    Counts are accumulated as exact integers, ``2 * wins + ties``, and divided
    once, so the result is the correctly rounded value of the rational.
    """
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.sort(np.asarray(scores_neg, dtype=np.float64).ravel())
    if pos.size == 0 or neg.size == 0:
        raise UndefinedAUCError("AUC needs at least one positive and one negative score")
    below = np.searchsorted(neg, pos, side="left")
    upto = np.searchsorted(neg, pos, side="right")
    twice = 2 * int(below.sum()) + int((upto - below).sum())
    return twice / (2 * pos.size * neg.size)


def auc_from_labels(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels, dtype=bool)
    return auc(scores[labels], scores[~labels])


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 1.0
    l2: float = 1e-4


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def probe_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    z = X @ w[:-1] + w[-1]
    # mean log-loss in a numerically safe form
    nll = np.logaddexp(0.0, z) - y * z
    return float(nll.mean() + 0.5 * l2 * (w[:-1] @ w[:-1]))


def train_linear_probe(embeddings, labels, cfg: ProbeConfig = ProbeConfig(), history: list | None = None) -> np.ndarray:
    """Logistic regression by full-batch gradient descent; returns ``[w..., b]``.

    The bias is not penalised. ``history`` receives the loss before every epoch.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=bool).astype(np.float64)
    if X.shape[0] < 2 or y.min() == y.max():
        raise ValueError("probe needs at least two examples covering both classes")
    n, d = X.shape
    w = np.zeros(d + 1)
    for _ in range(cfg.epochs):
        if history is not None:
            history.append(probe_loss(w, X, y, cfg.l2))
        r = _sigmoid(X @ w[:-1] + w[-1]) - y
        grad = np.empty(d + 1)
        grad[:-1] = X.T @ r / n + cfg.l2 * w[:-1]
        grad[-1] = r.mean()
        w -= cfg.lr * grad
    return w


def probe_scores(w: np.ndarray, X) -> np.ndarray:
    return np.asarray(X) @ w[:-1] + w[-1]


@dataclass
class ProbeTask:
    task_id: int
    name: str
    label_index: int
    train_ids: list[int]
    test_ids: list[int]

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise ValueError(f"task {self.name}: train and test users overlap")


@dataclass
class ProbeResult:
    task_id: int
    name: str
    auc: float | None
    n_train: int
    n_test: int
    checksum: str = ""
    skipped: str | None = None


def make_tasks(user_ids: Sequence[int], n_tasks: int, seed: int = 0, test_frac: float = 0.3) -> list[ProbeTask]:
    """One task per label bit, sharing a seeded user split."""
    ids = np.array(sorted(set(int(u) for u in user_ids)))
    perm = np.random.default_rng([seed, 99]).permutation(ids.size)
    n_test = int(round(test_frac * ids.size))
    test = sorted(ids[perm[:n_test]].tolist())
    train = sorted(ids[perm[n_test:]].tolist())
    return [ProbeTask(k, f"task{k}", k, train, test) for k in range(n_tasks)]


def user_table(pairs: Sequence[PairRecord]) -> dict[int, PairRecord]:
    """One query-free record per user (behavior pairs preferred)."""
    table: dict[int, PairRecord] = {}
    for p in pairs:
        cur = table.get(p.user_id)
        if cur is None or (cur.kind != "behavior" and p.kind == "behavior"):
            table[p.user_id] = p
    return table


def embed_users(
    encoder: Encoder,
    vocab: Vocab,
    users: dict[int, PairRecord],
    strategy: str,
    state: MaskScheduleState,
    batch_size: int = 64,
) -> dict[int, np.ndarray]:
    """Frozen user-tower embeddings under the strategy's inference mask."""
    ids = sorted(users)
    out: dict[int, np.ndarray] = {}
    with T.no_grad():
        for i in range(0, len(ids), batch_size):
            chunk = ids[i : i + batch_size]
            seqs = [render_template(users[u].user_text, None, vocab, encoder.cfg.max_len) for u in chunk]
            emb = tower_forward(encoder, seqs, USER_TOWER, strategy, state, phase="eval").embeddings.data
            for u, e in zip(chunk, emb):
                out[u] = e
    return out


def encoder_embedder(encoder: Encoder, vocab: Vocab, strategy: str, state: MaskScheduleState) -> Callable[[str], np.ndarray]:
    """Unit-norm text embedding through the matching tower.

    Delimited history text (starting with a modality tag) goes through the
    user tower; anything else is treated as an answer.
    """

    def emb(text: str) -> np.ndarray:
        if text.startswith("<"):
            seq, tower = render_user_side(text, vocab, encoder.cfg.max_len), USER_TOWER
        else:
            seq, tower = render_answer(text, vocab, encoder.cfg.max_len), ANSWER_TOWER
        with T.no_grad():
            v = tower_forward(encoder, [seq], tower, strategy, state, phase="eval").embeddings.data[0]
        n = float(np.linalg.norm(v))
        if n == 0.0 or not np.isfinite(n):
            raise ArithmeticError("degenerate encoder embedding")
        return v / n

    return emb


def run_probes(
    embeddings: dict[int, np.ndarray],
    labels: dict[int, Sequence[bool]],
    tasks: Sequence[ProbeTask],
    cfg: ProbeConfig = ProbeConfig(),
) -> list[ProbeResult]:
    results = []
    for task in tasks:
        tr = [u for u in task.train_ids if u in embeddings]
        te = [u for u in task.test_ids if u in embeddings]
        ytr = np.array([labels[u][task.label_index] for u in tr], dtype=bool)
        yte = np.array([labels[u][task.label_index] for u in te], dtype=bool)
        reason = None
        if not tr or not te:
            reason = "empty split"
        elif ytr.all() or not ytr.any() or yte.all() or not yte.any():
            reason = "single class in a split"
        if reason:
            logger.warning("skipping %s: %s", task.name, reason)
            results.append(ProbeResult(task.task_id, task.name, None, len(tr), len(te), skipped=reason))
            continue
        w = train_linear_probe(np.stack([embeddings[u] for u in tr]), ytr, cfg)
        s = probe_scores(w, np.stack([embeddings[u] for u in te]))
        digest = hashlib.sha256(np.ascontiguousarray(w).tobytes()).hexdigest()[:16]
        results.append(ProbeResult(task.task_id, task.name, auc_from_labels(s, yte), len(tr), len(te), digest))
    return results


def mean_auc(results: Sequence[ProbeResult]) -> float:
    vals = [r.auc for r in results if r.auc is not None]
    return float(np.mean(vals)) if vals else float("nan")


def evaluate_all(
    encoder: Encoder,
    vocab: Vocab,
    pairs: Sequence[PairRecord],
    tasks: Sequence[ProbeTask],
    strategy: str,
    state: MaskScheduleState,
    cfg: ProbeConfig = ProbeConfig(),
) -> tuple[list[ProbeResult], float]:
    users = user_table(pairs)
    emb = embed_users(encoder, vocab, users, strategy, state)
    labels = {u: p.labels for u, p in users.items()}
    results = run_probes(emb, labels, tasks, cfg)
    return results, mean_auc(results)


RESULT_COLUMNS = ("strategy", "task", "auc", "n_train", "n_test")


def write_results(path, strategy: str, results: Sequence[ProbeResult], mode: str = "w") -> None:
    """Tab-separated per-task rows plus an ``Avg`` summary row."""
    path = Path(path)
    new = mode == "w" or not path.exists()
    with open(path, mode, encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        if new:
            w.writerow(RESULT_COLUMNS)
        for r in results:
            w.writerow([strategy, r.name, "skipped" if r.auc is None else repr(r.auc), r.n_train, r.n_test])
        w.writerow([strategy, "Avg", repr(mean_auc(results)), "", ""])
