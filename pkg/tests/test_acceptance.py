"""End-to-end acceptance checks, one test per criterion.

Criteria 7 and 8 train full-size runs (2,000 steps each) and take most of the
suite's wall clock. Their results are computed once per session and shared.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from maskbench import tensor as T
from maskbench.cli import main
from maskbench.contrastive import LossConfig, SimilarityBundle, info_nce, mask_factor
from maskbench.encoder import Encoder, EncoderConfig, TokenSequence, Vocab, extract_embeddings
from maskbench.evalharness import auc, evaluate_all, make_tasks
from maskbench.masking import (
    MaskScheduleState,
    bidirectional_mask,
    causal_mask,
    column_soft_mask,
    ggsm_mask,
    soft_hybrid_mask,
    visibility,
)
from maskbench.synthdata import (
    PairRecord,
    QAConfig,
    TemplateGenerator,
    builtin_pairs,
    difficulty_score,
    filter_hard,
    generate_corpus,
    hashed_bow_embedder,
    qa_pipeline,
    write_corpus,
)
from maskbench.trainer import TrainConfig, Trainer, smoothed

LEARN_STRATEGIES = ("causal", "hybrid_block", "bidirectional", "scheduler_linear", "ggsm")
RELATION_SEEDS = (7, 8, 9)
BUDGET_S = 20 * 60


def brute_force_loss(s_ua, s_uu, s_aa, tau, margin):
    B = len(s_ua)
    total = 0.0
    for i in range(B):
        pos = s_ua[i][i]
        z = math.exp(pos / tau)
        for j in range(B):
            if j != i:
                for mat in (s_ua, s_uu, s_aa):
                    if not mat[i][j] > pos + margin:
                        z += math.exp(mat[i][j] / tau)
        total += math.log(z) - pos / tau
    return total / B


def pair_count_auc(pos, neg):
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def unit_rows(m):
    return m / np.linalg.norm(m, axis=-1, keepdims=True)


# ---------------------------------------------------------------- 1


def test_criterion_1_autodiff_soundness():
    t0 = time.perf_counter()
    vocab = Vocab.default()
    cfg = EncoderConfig(len(vocab), d_model=8, n_heads=2, n_layers=2, d_ff=16, max_len=6, seed=1, init_std=0.5, resid_std=0.5)
    enc = Encoder(cfg)
    r = np.random.default_rng(0)
    L, B = 6, 2
    users = [TokenSequence(r.integers(20, len(vocab), L), user_pos=L - 1) for _ in range(B)]
    answers = [TokenSequence(r.integers(20, len(vocab), L), eos_pos=L - 1) for _ in range(B)]
    state = MaskScheduleState("ggsm", 10, 20, t=14)
    state.frozen_norms = r.random(cfg.max_positions) * 3
    user_masks = [ggsm_mask(L, state)] * B
    answer_masks = [causal_mask(L)] * B
    loss_cfg = LossConfig(temperature=0.5, margin=0.1)

    def loss():
        u = extract_embeddings(enc.forward_batch(users, user_masks), [L - 1] * B)
        a = extract_embeddings(enc.forward_batch(answers, answer_masks), [L - 1] * B)
        return info_nce(SimilarityBundle.from_embeddings(u, a), loss_cfg).total

    used = [p for k, p in enc.params.named() if not k.startswith(("mod_", "adapter_", "global_", "gate"))]
    err = T.finite_diff_check(loss, used, h=1e-6)
    elapsed = time.perf_counter() - t0
    assert err <= 1e-5
    assert elapsed < 60.0


# ---------------------------------------------------------------- 2


def test_criterion_2_mask_algebra():
    r = np.random.default_rng(2)
    g = r.random(64) * 4
    for t in (200, 201, 500):
        st = MaskScheduleState("ggsm", 100, 200, t)
        st.frozen_norms = g
        assert np.array_equal(ggsm_mask(17, st).bias, bidirectional_mask(17).bias)
    st = MaskScheduleState("ggsm", 100, 200, 100)
    st.frozen_norms = g
    assert np.array_equal(ggsm_mask(17, st).bias, column_soft_mask(17, visibility(g)).bias)
    st = MaskScheduleState("ggsm", 100, 200, 5)
    st.lagged_norms = np.zeros(64)
    iu = np.triu_indices(9, k=1)
    assert np.all(np.abs(ggsm_mask(9, st).bias[iu] - math.log(0.5)) <= 1e-12)

    for _ in range(1000):
        L = int(r.integers(2, 30))
        t = int(r.integers(0, 260))
        st = MaskScheduleState("ggsm", 100, 200, t)
        st.lagged_norms = r.random(40) * r.choice([0.1, 1.0, 20.0])
        st.frozen_norms = r.random(40) * r.choice([0.1, 1.0, 20.0])
        for m in (ggsm_mask(L, st), soft_hybrid_mask(L, st.lagged_norms)):
            b = m.bias
            for j in range(1, L):
                assert np.all(b[:j, j] == b[0, j])


# ---------------------------------------------------------------- 3


def test_criterion_3_causal_no_leakage():
    vocab = Vocab.default()
    enc = Encoder(TrainConfig().encoder_config(len(vocab)))
    r = np.random.default_rng(3)
    leaked = False
    for _ in range(100):
        L = int(r.integers(3, 20))
        seq = TokenSequence(r.integers(20, len(vocab), L))
        k = int(r.integers(1, L))
        other = TokenSequence(seq.tokens.copy())
        other.tokens[k:] = (other.tokens[k:] + r.integers(1, 50, L - k) - 20) % (len(vocab) - 20) + 20
        with T.no_grad():
            a = enc.forward(seq, causal_mask(L)).final.data[0]
            b = enc.forward(other, causal_mask(L)).final.data[0]
            c = enc.forward(seq, bidirectional_mask(L)).final.data[0]
            d = enc.forward(other, bidirectional_mask(L)).final.data[0]
        assert np.max(np.abs(a[:k] - b[:k])) <= 1e-12
        leaked = leaked or np.max(np.abs(c[:k] - d[:k])) > 1e-6
    assert leaked


# ---------------------------------------------------------------- 4


def test_criterion_4_loss_closed_forms():
    one = info_nce(SimilarityBundle(np.array([[0.7]]), np.ones((1, 1)), np.ones((1, 1))), LossConfig())
    assert abs(one.total.item()) <= 1e-12
    s = np.full((4, 4), 0.3)
    same = info_nce(SimilarityBundle(s, s, s), LossConfig(temperature=0.05, margin=0.1))
    assert same.masked_negatives == 0
    assert abs(same.total.item() - math.log(10.0)) <= 1e-9
    r = np.random.default_rng(4)
    for _ in range(1000):
        u = unit_rows(r.normal(size=(3, 6)))
        a = unit_rows(u + r.normal(size=(3, 6)) * r.uniform(0.1, 2.0))
        s_ua, s_uu, s_aa = u @ a.T, u @ u.T, a @ a.T
        tau = float(r.choice([0.05, 0.1, 0.5, 1.0]))
        margin = float(r.choice([0.0, 0.05, 0.1, 0.3]))
        got = info_nce(SimilarityBundle(s_ua, s_uu, s_aa), LossConfig(tau, margin)).total.item()
        want = brute_force_loss(s_ua.tolist(), s_uu.tolist(), s_aa.tolist(), tau, margin)
        assert abs(got - want) <= 1e-10


# ---------------------------------------------------------------- 5


def test_criterion_5_mask_factor_oracle():
    r = np.random.default_rng(5)
    n = 10_000
    # values on a coarse grid so that exact ties s_ij == s_pos + margin occur
    s_ij = np.round(r.uniform(-1, 1, n) * 20) / 20
    s_pos = np.round(r.uniform(-1, 1, n) * 20) / 20
    margin = r.choice([0.0, 0.05, 0.1, 0.25, -0.1], n)
    fast = mask_factor(s_ij, s_pos, margin)
    slow = np.array([0 if float(a) > float(p) + float(c) else 1 for a, p, c in zip(s_ij, s_pos, margin)])
    assert np.array_equal(fast, slow)
    assert np.any(s_ij == s_pos + margin)


# ---------------------------------------------------------------- 6


def test_criterion_6_auc_oracle():
    r = np.random.default_rng(6)
    for _ in range(1000):
        pos = r.integers(0, 8, int(r.integers(1, 30))).astype(float)
        neg = r.integers(0, 8, int(r.integers(1, 30))).astype(float)
        assert auc(pos, neg) == pair_count_auc(pos.tolist(), neg.tolist())


# ---------------------------------------------------------- 7 and 8


class RunCache:
    """Full-size training runs shared by the learnability and relation checks."""

    def __init__(self):
        self.pairs = builtin_pairs(n_users=2000, n_archetypes=4, seed=7, noise=0.05)
        self.tasks = make_tasks([p.user_id for p in self.pairs], len(self.pairs[0].labels), seed=7)
        self.runs: dict[tuple[str, int], dict] = {}

    def get(self, strategy: str, seed: int, evaluate: bool) -> dict:
        key = (strategy, seed)
        if key in self.runs and (self.runs[key]["trained_auc"] is not None or not evaluate):
            return self.runs[key]
        t0 = time.perf_counter()
        cfg = TrainConfig(strategy=strategy, seed=seed, steps=2000, batch_size=32)
        tr = Trainer(cfg, self.pairs)
        untrained = trained = None
        if evaluate:
            untrained = evaluate_all(tr.encoder, tr.vocab, self.pairs, self.tasks, strategy, tr.state.schedule)[1]
        tr.run()
        if evaluate:
            trained = evaluate_all(tr.encoder, tr.vocab, self.pairs, self.tasks, strategy, tr.state.schedule)[1]
        losses = tr.state.losses
        run = {
            "initial": smoothed(losses, 100, at="start"),
            "final": smoothed(losses, 100),
            "untrained_auc": untrained,
            "trained_auc": trained,
            "seconds": time.perf_counter() - t0,
        }
        self.runs[key] = run
        return run


@pytest.fixture(scope="session")
def run_cache():
    return RunCache()


def test_criterion_7_end_to_end_learnability(run_cache):
    rows = {s: run_cache.get(s, 7, evaluate=True) for s in LEARN_STRATEGIES}
    total = sum(r["seconds"] for r in rows.values())
    report = "\n".join(
        f"{s}: loss {r['initial']:.3f} -> {r['final']:.3f} (ratio {r['final'] / r['initial']:.3f}), "
        f"AUC untrained {r['untrained_auc']:.3f} trained {r['trained_auc']:.3f}, {r['seconds']:.0f}s"
        for s, r in rows.items()
    )
    print(report, f"\ntotal {total:.0f}s")
    for s, r in rows.items():
        assert r["final"] <= 0.5 * r["initial"], f"{s} loss did not halve\n{report}"
        assert r["trained_auc"] >= 0.80, f"{s} probe AUC too low\n{report}"
        assert 0.40 <= r["untrained_auc"] <= 0.60, f"{s} untrained AUC outside the chance band\n{report}"
    assert total <= BUDGET_S, f"five runs took {total:.0f}s, over the {BUDGET_S}s budget\n{report}"


def test_criterion_8_ggsm_vs_scheduler(run_cache):
    wins = []
    lines = []
    for seed in RELATION_SEEDS:
        g = run_cache.get("ggsm", seed, evaluate=False)["final"]
        s = run_cache.get("scheduler_linear", seed, evaluate=False)["final"]
        wins.append(g <= s * 1.05)
        lines.append(f"seed {seed}: ggsm {g:.4f} scheduler_linear {s:.4f}")
    print("\n".join(lines))
    assert sum(wins) >= 2, "\n".join(lines)


# ---------------------------------------------------------------- 9


def test_criterion_9_difficulty_pipeline(tmp_path):
    r = np.random.default_rng(9)
    for _ in range(1000):
        d = int(r.integers(2, 16))
        u, a = unit_rows(r.normal(size=d)), unit_rows(r.normal(size=d))
        p = PairRecord("behavior", 0, "U", "A", [True])
        table = {"U": u, "A": a}
        assert difficulty_score(p, table.__getitem__) == 1.0 - float(u @ a)

    scores = r.uniform(0, 2, 500)
    scores[::25] = 0.6
    pairs = [PairRecord("behavior", i, "u", "a", [True], difficulty=float(s)) for i, s in enumerate(scores)]
    kept = filter_hard(pairs, 0.6)
    assert [p.user_id for p in kept] == [i for i, s in enumerate(scores) if s >= 0.6]

    users = generate_corpus(300, 4, seed=7, noise=0.05)
    cfg = QAConfig(calibration_size=200, T_filter=0.6, scale_n=150, seed=7)
    blobs = []
    for k in range(2):
        out = qa_pipeline(users, TemplateGenerator(), hashed_bow_embedder(seed=7), cfg)
        blobs.append(write_corpus(tmp_path / f"qa{k}.jsonl", out).read_bytes())
    assert blobs[0] == blobs[1] and len(blobs[0]) > 0


# ---------------------------------------------------------------- 10


def test_criterion_10_compare_reproducible(tmp_path, monkeypatch):
    monkeypatch.delenv("MASKBENCH_DATA_DIR", raising=False)
    data = tmp_path / "data"
    assert main(["--quiet", "--out", str(data), "gen", "--users", "120"]) == 0
    flags = [
        "--corpus", str(data / "corpus.jsonl"), "--steps", "12", "--warmup", "3", "--batch-size", "16",
        "--d-model", "16", "--n-heads", "2", "--n-layers", "1", "--d-ff", "32",
    ]
    first = tmp_path / "first"
    assert main(["--quiet", "--out", str(first), "compare", *flags]) == 0
    second = tmp_path / "second"
    assert main(["--quiet", "--config", str(first / "compare_config.json"), "--out", str(second), "compare"]) == 0
    names = sorted(p.name for p in first.glob("*.tsv"))
    assert "report.tsv" in names and len(names) == 1 + len(LEARN_STRATEGIES)
    for name in names:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
