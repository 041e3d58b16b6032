import json

import numpy as np
import pytest

from codebook import Codebook
from fingerprint import Fingerprint
from helpers import NumericalError, ParameterError, StateError
from scoring import (
    MergePlan,
    ScoringConfig,
    SynergyPlan,
    cosine_similarity_matrix,
    ema_weights,
    ema_weights_recursive,
    kernel_weights,
    make_merge_plan,
    mos_weights,
    plan_from_codebook,
    ridge_leverage_scores,
)


def dense_rls(Z, lam, c):
    inverse = np.linalg.inv(Z.T @ Z / c + lam * np.eye(Z.shape[1]))
    return np.einsum("ij,jk,ik->i", Z, inverse, Z)


@pytest.mark.parametrize("form", ["auto", "primal", "dual"])
def test_single_unit_fingerprint(form):
    z = np.zeros((1, 4))
    z[0, 1] = 1.0
    scores = ridge_leverage_scores(z, ScoringConfig(ridge_lambda=0.5), form=form)
    assert abs(scores[0] - 2.0 / 3.0) < 1e-12


@pytest.mark.parametrize("form", ["primal", "dual"])
def test_two_identical_unit_fingerprints(form):
    z = np.array([[0.6, 0.8, 0.0], [0.6, 0.8, 0.0]])
    scores = ridge_leverage_scores(z, ScoringConfig(ridge_lambda=0.5), form=form)
    np.testing.assert_allclose(scores, [2.0 / 3.0, 2.0 / 3.0], rtol=1e-12)


def test_matches_dense_inverse_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        n, d_prime = int(rng.integers(1, 33)), int(rng.integers(1, 65))
        lam = float(rng.choice([0.01, 0.1, 1.0]))
        Z = rng.standard_normal((n, d_prime))
        cfg = ScoringConfig(ridge_lambda=lam)
        expected = dense_rls(Z, lam, n)
        np.testing.assert_allclose(ridge_leverage_scores(Z, cfg), expected, rtol=1e-6)
        # The larger Gram form carries rank-deficiency noise, so only absolute agreement is expected.
        for form in ("primal", "dual"):
            np.testing.assert_allclose(ridge_leverage_scores(Z, cfg, form=form), expected, rtol=1e-6, atol=1e-9)


def test_fixed_divisor_uses_k():
    Z = np.random.default_rng(1).standard_normal((6, 3))
    cfg = ScoringConfig(ridge_lambda=0.1, divisor_mode="fixed", top_k=2)
    np.testing.assert_allclose(ridge_leverage_scores(Z, cfg), dense_rls(Z, 0.1, 2), rtol=1e-9)


def test_duplicated_fingerprints_score_below_novel_ones():
    rng = np.random.default_rng(5)
    for _ in range(100):
        d_prime = int(rng.integers(2, 17))
        u = rng.standard_normal(d_prime)
        v = rng.standard_normal(d_prime)
        v -= (v @ u) / (u @ u) * u
        v *= np.linalg.norm(u) / np.linalg.norm(v)
        lam = float(rng.choice([0.01, 0.1, 1.0]))
        scores = ridge_leverage_scores(np.stack([u, u, v]), ScoringConfig(ridge_lambda=lam))
        assert scores[0] == pytest.approx(scores[1], rel=1e-9)
        assert scores[2] > scores[0]


def test_scores_are_bounded_by_norm_over_lambda():
    rng = np.random.default_rng(12)
    for _ in range(100):
        n, d_prime = int(rng.integers(1, 41)), int(rng.integers(1, 33))
        lam = float(rng.choice([1e-3, 0.01, 0.1, 1.0]))
        Z = rng.standard_normal((n, d_prime))
        scores = ridge_leverage_scores(Z, ScoringConfig(ridge_lambda=lam))
        assert np.all(scores > 0)
        assert np.all(scores <= np.sum(Z ** 2, axis=1) / lam * (1 + 1e-9))


@pytest.mark.parametrize("alpha", [0.1, 3.0, 10.0])
def test_top_k_survives_joint_rescaling(alpha):
    rng = np.random.default_rng(13)
    for _ in range(20):
        Z = rng.standard_normal((20, 8))
        base = ridge_leverage_scores(Z, ScoringConfig(ridge_lambda=0.05))
        scaled = ridge_leverage_scores(alpha * Z, ScoringConfig(ridge_lambda=0.05 * alpha ** 2))
        np.testing.assert_allclose(scaled, base, rtol=1e-8)
        np.testing.assert_array_equal(np.argsort(-scaled, kind="stable")[:5], np.argsort(-base, kind="stable")[:5])


def test_primal_and_dual_forms_agree_relatively():
    rng = np.random.default_rng(14)
    for _ in range(200):
        n, d_prime = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        cfg = ScoringConfig(ridge_lambda=float(rng.choice([0.01, 0.1, 1.0])))
        Z = rng.standard_normal((n, d_prime))
        primal = ridge_leverage_scores(Z, cfg, form="primal")
        dual = ridge_leverage_scores(Z, cfg, form="dual")
        assert np.max(np.abs(primal - dual) / dual) <= 1e-6


def test_bad_inputs():
    with pytest.raises(ParameterError):
        ScoringConfig(ridge_lambda=0.0)
    with pytest.raises(ParameterError):
        ScoringConfig(ridge_lambda=-1.0)
    with pytest.raises(ParameterError):
        ridge_leverage_scores(np.array([[1.0, np.nan]]), ScoringConfig())
    with pytest.raises(ParameterError):
        ridge_leverage_scores(np.zeros((0, 3)), ScoringConfig())


def test_plan_hand_example():
    plan = make_merge_plan([3.0, 1.0, 2.0], [1, 2, 3], 2)
    assert plan.selected_steps == (1, 3)
    assert plan.raw_scores == (3.0, 2.0)
    np.testing.assert_allclose(plan.weights, [0.6, 0.4], rtol=1e-12)


def test_plan_single_entry_and_symmetry():
    assert make_merge_plan([0.2], [4], 5).weights == (1.0,)
    plan = make_merge_plan([1.0, 1.0, 1.0], [1, 2, 3], 3)
    np.testing.assert_allclose(plan.weights, [1 / 3] * 3, rtol=1e-15)
    assert plan.selected_steps == (1, 2, 3)


def test_plan_rejects_k_below_one():
    with pytest.raises(ParameterError):
        make_merge_plan([1.0], [1], 0)


def test_plan_json_line():
    payload = json.loads(make_merge_plan([3.0, 1.0], [1, 2], 2).to_json())
    assert list(payload) == ["steps", "scores", "weights", "weight_sum"]
    assert abs(payload["weight_sum"] - 1.0) <= 1e-9


def test_plan_weights_must_sum_to_one():
    with pytest.raises(ParameterError):
        MergePlan((1, 2), (1.0, 1.0), (0.5, 0.6))


def test_plan_weights_must_be_positive():
    with pytest.raises(ParameterError):
        MergePlan((1, 2), (1.0, 0.0), (1.0, 0.0))
    with pytest.raises(ParameterError):
        MergePlan((1, 2), (2.0, -1.0), (2.0, -1.0))
    assert SynergyPlan((1, 2), (2.0, -1.0), (2.0, -1.0)).weights == (2.0, -1.0)


def test_zero_scores_are_never_selected():
    plan = make_merge_plan([0.0, 2.0, 0.0, 1.0], [1, 2, 3, 4], 4)
    assert plan.selected_steps == (2, 4)
    assert all(0.0 < w <= 1.0 for w in plan.weights)


def test_zero_norm_fingerprint_is_left_out(random_checkpoint):
    rng = np.random.default_rng(15)
    codebook = Codebook(3)
    for step in range(1, 7):
        values = np.zeros(3) if step == 3 else rng.standard_normal(3)
        codebook.append(Fingerprint(step, values), random_checkpoint(step, step=step))
    for include_latest in (True, False):
        plan = plan_from_codebook(codebook, ScoringConfig(top_k=6, include_latest=include_latest))
        assert 3 not in plan.selected_steps
        assert len(plan.selected_steps) == 5
        assert all(0.0 < w <= 1.0 for w in plan.weights)


def test_plan_from_codebook_keeps_latest(make_codebook):
    codebook = make_codebook(8, seed=1)
    plan = plan_from_codebook(codebook, ScoringConfig(top_k=3))
    assert 8 in plan.selected_steps
    assert len(plan.selected_steps) == 3
    assert abs(plan.weight_sum - 1.0) <= 1e-9

    single = plan_from_codebook(codebook, ScoringConfig(top_k=1))
    assert single.selected_steps == (8,)
    assert single.weights == (1.0,)


def test_plan_from_codebook_pure_leverage(make_codebook):
    codebook = make_codebook(8, seed=1)
    cfg = ScoringConfig(top_k=3, include_latest=False)
    scores = ridge_leverage_scores(codebook.fingerprint_matrix(), cfg)
    expected = tuple(int(i) + 1 for i in np.argsort(-scores, kind="stable")[:3])
    assert plan_from_codebook(codebook, cfg).selected_steps == expected


def test_window_limits_candidates(make_codebook):
    plan = plan_from_codebook(make_codebook(10), ScoringConfig(top_k=5, window=3))
    assert set(plan.selected_steps) == {8, 9, 10}


def test_other_selection_strategies(make_codebook):
    codebook = make_codebook(10, seed=4)
    recent = plan_from_codebook(codebook, ScoringConfig(top_k=3, selection="recent"))
    assert set(recent.selected_steps) == {8, 9, 10}

    for selection in ("random", "kmeans_pp"):
        cfg = ScoringConfig(top_k=4, selection=selection, seed=3)
        first = plan_from_codebook(codebook, cfg)
        assert first == plan_from_codebook(codebook, cfg)
        assert len(set(first.selected_steps)) == 4
        assert 10 in first.selected_steps
        np.testing.assert_allclose(first.weights, [0.25] * 4)


def test_plan_from_empty_codebook():
    with pytest.raises(StateError):
        plan_from_codebook(Codebook(4), ScoringConfig())


def test_single_zero_fingerprint_cannot_be_weighted(random_checkpoint):
    codebook = Codebook(3)
    codebook.append(Fingerprint(1, np.zeros(3)), random_checkpoint(0, step=1))
    with pytest.raises(ParameterError):
        plan_from_codebook(codebook, ScoringConfig())


#############################
# EMA weights
#############################

def test_ema_weights_small_cases():
    assert ema_weights(0, 0.9).tolist() == [1.0]
    np.testing.assert_allclose(ema_weights(1, 0.9), [0.9, 0.1], rtol=1e-15)


@pytest.mark.parametrize("beta", [0.9, 0.99, 0.999])
def test_ema_closed_form_matches_recursion(beta):
    closed = ema_weights(100, beta)
    np.testing.assert_allclose(ema_weights_recursive(100, beta), closed, rtol=1e-12)
    assert abs(closed.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("beta", [0.0, 1.0, -0.5, 1.5])
def test_ema_rejects_beta_outside_open_interval(beta):
    with pytest.raises(ParameterError):
        ema_weights(3, beta)


#############################
# Kernel synergy weights
#############################

def test_identity_kernel_gives_uniform_weights():
    for k in range(1, 8):
        eye = np.eye(k)
        weights = mos_weights(eye, eye, jitter=0.0)
        np.testing.assert_array_equal(weights, np.full(k, 1.0 / k))
        np.testing.assert_allclose(kernel_weights(eye), np.full(k, 1.0 / k), rtol=1e-12)


@pytest.mark.parametrize("rho", [-0.9, -0.3, 0.0, 0.5, 0.95])
def test_two_model_kernel_is_symmetric(rho):
    weights = kernel_weights(np.array([[1.0, rho], [rho, 1.0]]))
    np.testing.assert_allclose(weights, [0.5, 0.5], rtol=1e-12)


def test_random_kernels_match_dense_inverse():
    rng = np.random.default_rng(11)
    for _ in range(50):
        k = int(rng.integers(2, 9))
        basis = rng.standard_normal((k, 16))
        kernel = basis @ basis.T / 16 + 0.5 * np.eye(k)
        row_sums = np.linalg.inv(kernel + 1e-6 * np.eye(k)).sum(axis=1)
        expected = row_sums / row_sums.sum()
        weights = kernel_weights(kernel)
        np.testing.assert_allclose(weights, expected, rtol=1e-8, atol=1e-12)
        assert abs(weights.sum() - 1.0) <= 1e-9


def test_singular_kernel_is_a_numerical_error():
    with pytest.raises(NumericalError) as err:
        kernel_weights(np.ones((3, 3)), jitter=0.0)
    assert "kernel_jitter" in str(err.value)


def test_negative_weights_can_be_clamped():
    kernel = np.array([[1.0, 0.6, 0.0], [0.6, 1.0, 0.6], [0.0, 0.6, 1.0]])
    raw = kernel_weights(kernel)
    assert raw[1] < 0
    np.testing.assert_allclose(kernel_weights(kernel, clamp_negative=True), [0.5, 0.0, 0.5], atol=1e-9)


def test_cosine_similarity_handles_zero_vectors():
    sims = cosine_similarity_matrix([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    np.testing.assert_allclose(sims, [[1.0, 0.0, 1.0], [0.0, 0.0, 0.0], [1.0, 0.0, 1.0]])


def test_mos_weights_follow_a_permutation():
    rng = np.random.default_rng(16)
    for _ in range(20):
        outputs, features = rng.standard_normal((5, 24)), rng.standard_normal((5, 12))
        perm = rng.permutation(5)
        weights = mos_weights(outputs, features)
        np.testing.assert_allclose(mos_weights(outputs[perm], features[perm]), weights[perm], rtol=1e-9, atol=1e-12)
