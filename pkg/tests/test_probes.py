import math

import numpy as np
import pytest
from scipy import stats

from codebook import Codebook
from fingerprint import Fingerprint
from helpers import ParameterError, StateError
from probes import (
    correlate_distances,
    fingerprint_weight_correlation,
    hessian_rls_check,
    kendall_tau,
    lmc_barrier,
    pearson_r,
    toy_lmc_pair,
)
from scoring import ScoringConfig, ridge_leverage_scores
from tensor_store import Checkpoint, Tensor, flatten_checkpoint
from tta_sim import ShiftSpec, StreamConfig, run_codemerge


def vector_checkpoint(values):
    return Checkpoint(0, {"theta": Tensor.from_array(values)})


#############################
# Linear mode connectivity
#############################

def test_identical_endpoints_have_no_barrier():
    theta = vector_checkpoint(np.random.default_rng(0).standard_normal(8))
    report = lmc_barrier(theta, theta, lambda c: float(np.sum(flatten_checkpoint(c) ** 2)))
    assert abs(report.max_deviation) <= 1e-9
    assert len(report.curve) == 11


def test_convex_loss_has_no_barrier():
    rng = np.random.default_rng(1)
    for _ in range(50):
        center = rng.standard_normal(8)
        curvature = rng.uniform(0.1, 3.0, size=8)

        def loss(c):
            delta = flatten_checkpoint(c) - center
            return float(np.sum(curvature * delta ** 2))

        report = lmc_barrier(vector_checkpoint(rng.standard_normal(8)), vector_checkpoint(rng.standard_normal(8)), loss)
        assert report.max_deviation <= 1e-9


def test_curve_endpoints_are_the_inputs():
    a, b = vector_checkpoint([1.0, 2.0]), vector_checkpoint([3.0, -2.0])
    report = lmc_barrier(a, b, lambda c: float(flatten_checkpoint(c)[0]), grid_points=5)
    assert [p.lam for p in report.curve] == [0.0, 0.25, 0.5, 0.75, 1.0]
    assert report.curve[0].loss == 1.0
    assert report.curve[-1].loss == 3.0


def test_grid_must_have_interior_points():
    theta = vector_checkpoint([1.0])
    with pytest.raises(ParameterError):
        lmc_barrier(theta, theta, lambda c: 0.0, grid_points=2)


def test_finetuned_toy_pair_reports_a_finite_barrier():
    cfg = StreamConfig(n_steps=10, seed=6)
    theta_a, theta_b, loss_fn = toy_lmc_pair(cfg, n_epochs=2)
    assert theta_a != theta_b
    report = lmc_barrier(theta_a, theta_b, loss_fn)
    assert math.isfinite(report.max_deviation)
    assert all(math.isfinite(p.loss) for p in report.curve)


#############################
# Hessian proportionality
#############################

def test_hessian_matches_half_the_leverage_score():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n, d_prime = int(rng.integers(1, 65)), int(rng.integers(1, 65))
        lam = float(rng.choice([0.01, 0.1, 1.0]))
        assert hessian_rls_check(rng.standard_normal((n, d_prime)), lam) <= 1e-8


def test_hessian_rank_one_value():
    z = np.array([[0.0, 1.0, 0.0]])
    assert hessian_rls_check(z, 0.5) <= 1e-12
    half = ridge_leverage_scores(z, ScoringConfig(ridge_lambda=0.5)) / 2.0
    assert abs(half[0] - 1.0 / 3.0) <= 1e-12


def test_large_lambda_limit():
    Z = np.random.default_rng(8).standard_normal((4, 8))
    lam = 1e6
    half = ridge_leverage_scores(Z, ScoringConfig(ridge_lambda=lam)) / 2.0
    np.testing.assert_allclose(half, np.sum(Z ** 2, axis=1) / (2 * lam), rtol=1e-4)
    assert hessian_rls_check(Z, lam) <= 1e-8


#############################
# Correlation harness
#############################

def test_affine_relation_is_perfectly_correlated():
    a = np.random.default_rng(9).standard_normal(20)
    report = correlate_distances(a, 2 * a)
    assert report.pearson_r == pytest.approx(1.0, abs=1e-12)
    assert report.kendall_tau == 1.0
    assert not report.degenerate


def test_reversed_ranking_is_anti_concordant():
    a = np.arange(10, dtype=float)
    assert kendall_tau(a, a[::-1] ** 2) == -1.0


def test_statistics_match_scipy():
    rng = np.random.default_rng(10)
    a, b = rng.standard_normal(30), rng.standard_normal(30)
    assert pearson_r(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)
    assert kendall_tau(a, b) == pytest.approx(stats.kendalltau(a, b)[0], abs=1e-12)


def test_pearson_without_variance_is_zero():
    assert pearson_r(np.ones(5), np.arange(5.0)) == 0.0
    assert pearson_r([1.0], [2.0]) == 0.0


def test_zero_variance_is_degenerate():
    report = correlate_distances(np.ones(6), np.arange(6.0))
    assert report.degenerate
    assert (report.pearson_r, report.kendall_tau) == (0.0, 0.0)


def test_correlation_needs_three_entries(make_codebook):
    with pytest.raises(StateError):
        fingerprint_weight_correlation(make_codebook(2))


def test_identical_fingerprints_are_degenerate(random_checkpoint):
    codebook = Codebook(2)
    for step in range(1, 4):
        codebook.append(Fingerprint(step, [1.0, 1.0]), random_checkpoint(step, step=step))
    report = fingerprint_weight_correlation(codebook)
    assert report.degenerate
    assert report.pairs == 3


def test_small_run_reports_every_pair():
    cfg = StreamConfig(n_steps=8, shift_schedule=(ShiftSpec(4, "mean_shift", 3.0),), seed=2)
    report = fingerprint_weight_correlation(run_codemerge(cfg).codebook)
    assert report.pairs == 9 * 8 // 2
    assert -1.0 <= report.pearson_r <= 1.0
    assert -1.0 <= report.kendall_tau <= 1.0


def test_default_scenario_fingerprints_track_weights():
    report = fingerprint_weight_correlation(run_codemerge(StreamConfig(seed=0)).codebook)
    assert report.pairs == 41 * 40 // 2
    assert report.pearson_r >= 0.5
    assert report.kendall_tau >= 0.4
