from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskbench import tensor as T
from maskbench.contrastive import LossConfig, SimilarityBundle, cosine_sim, info_nce, mask_factor
from maskbench.tensor import Tape, Tensor


def brute_force_loss(s_ua, s_uu, s_aa, tau, margin):
    """Explicit scalar loops over the three negative families."""
    B = len(s_ua)
    total = 0.0
    for i in range(B):
        pos = s_ua[i][i]
        z = math.exp(pos / tau)
        for j in range(B):
            if j == i:
                continue
            for mat in (s_ua, s_uu, s_aa):
                if not mat[i][j] > pos + margin:
                    z += math.exp(mat[i][j] / tau)
        total += -math.log(math.exp(pos / tau) / z)
    return total / B


def random_bundle(r, B, d=5):
    u = r.normal(size=(B, d))
    a = u + r.normal(size=(B, d)) * r.uniform(0.2, 2.0)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    return u @ a.T, u @ u.T, a @ a.T


def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert abs(cosine_sim(v, v) - 1.0) <= 1e-15
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    assert abs(cosine_sim([1, 1], [1, 0]) - 1 / math.sqrt(2)) <= 1e-15


def test_cosine_zero_vector():
    with pytest.raises(T.DegenerateError):
        cosine_sim([0, 0], [1, 0])


def test_mask_factor_examples():
    assert mask_factor(0.95, 0.8, 0.1) == 0
    assert mask_factor(0.85, 0.8, 0.1) == 1
    assert mask_factor(0.9, 0.5, 0.4) == 1  # exact boundary keeps the negative


def test_single_example_loss_is_zero():
    z = np.array([[0.3]])
    out = info_nce(SimilarityBundle(z, np.ones((1, 1)), np.ones((1, 1))), LossConfig())
    assert abs(out.total.item()) <= 1e-12


def test_all_equal_similarities_give_ln_ten():
    s = np.full((4, 4), 0.4)
    out = info_nce(SimilarityBundle(s, s, s), LossConfig(temperature=0.05, margin=0.1))
    assert abs(out.total.item() - math.log(10.0)) <= 1e-9
    assert out.masked_negatives == 0


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_random_bundles_match_brute_force(seed):
    r = np.random.default_rng(seed)
    s_ua, s_uu, s_aa = random_bundle(r, 3)
    tau = float(r.choice([0.05, 0.1, 0.5]))
    margin = float(r.choice([0.0, 0.1, 0.3]))
    out = info_nce(SimilarityBundle(s_ua, s_uu, s_aa), LossConfig(tau, margin))
    assert abs(out.total.item() - brute_force_loss(s_ua.tolist(), s_uu.tolist(), s_aa.tolist(), tau, margin)) <= 1e-10


def test_total_is_mean_of_per_example(rng):
    out = info_nce(SimilarityBundle(*random_bundle(rng, 6)), LossConfig())
    assert abs(out.total.item() - out.per_example.mean()) <= 1e-12
    assert 0 <= out.masked_negatives <= 3 * 6 * 5


def test_infinite_margin_keeps_everything(rng):
    out = info_nce(SimilarityBundle(*random_bundle(rng, 5)), LossConfig(margin=math.inf))
    assert out.masked_negatives == 0


def test_very_negative_margin_masks_everything(rng):
    out = info_nce(SimilarityBundle(*random_bundle(rng, 4)), LossConfig(margin=-2.0 - 1e-9))
    assert out.masked_negatives == 3 * 4 * 3
    assert np.allclose(out.per_example, 0.0, atol=1e-12)


def test_non_finite_similarity_rejected():
    s = np.zeros((2, 2))
    bad = s.copy()
    bad[0, 1] = np.nan
    with pytest.raises(T.NumericError):
        info_nce(SimilarityBundle(s, bad, s), LossConfig())


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(temperature=0.0)
    with pytest.raises(ValueError):
        LossConfig(margin=math.nan)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_gradients_match_finite_differences(B, seed):
    r = np.random.default_rng(seed)
    mats = [Tensor(m, requires_grad=True) for m in random_bundle(r, B)]
    cfg = LossConfig(temperature=0.5, margin=0.1)
    err = T.finite_diff_check(lambda: info_nce(SimilarityBundle(*mats), cfg).total, mats, h=1e-7)
    assert err <= 1e-6


def test_masked_negatives_get_zero_gradient(rng):
    s_ua, s_uu, s_aa = random_bundle(rng, 5)
    mats = [Tensor(m, requires_grad=True) for m in (s_ua, s_uu, s_aa)]
    with Tape():
        T.backward(info_nce(SimilarityBundle(*mats), LossConfig(margin=-0.2)).total)
    pos = np.diag(s_ua)[:, None]
    off = ~np.eye(5, dtype=bool)
    n_masked = 0
    for m, t in zip((s_ua, s_uu, s_aa), mats):
        dropped = off & (m > pos - 0.2)
        n_masked += dropped.sum()
        assert np.all(t.grad[dropped] == 0.0)
    assert n_masked > 0


def test_raising_positive_never_increases_loss(rng):
    s_ua, s_uu, s_aa = random_bundle(rng, 4)
    base = info_nce(SimilarityBundle(s_ua, s_uu, s_aa), LossConfig(margin=math.inf)).per_example
    bumped = s_ua.copy()
    bumped[2, 2] += 0.05
    after = info_nce(SimilarityBundle(bumped, s_uu, s_aa), LossConfig(margin=math.inf)).per_example
    assert after[2] <= base[2]


def test_from_embeddings_shapes(rng):
    u = T.l2_normalize(Tensor(rng.normal(size=(3, 4))))
    a = T.l2_normalize(Tensor(rng.normal(size=(3, 4))))
    b = SimilarityBundle.from_embeddings(u, a)
    assert np.allclose(np.diag(b.s_uu.data), 1.0, atol=1e-9)
    assert np.allclose(b.s_aa.data, b.s_aa.data.T, atol=1e-15)
