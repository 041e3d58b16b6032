# probes.py
"""Analytical checks run against the merge machinery and the simulator."""
import logging
import math
from dataclasses import replace
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy import stats

from helpers import NumericalError, ParameterError, StateError, make_rng, require_finite
from scoring import ScoringConfig, ridge_leverage_scores
from tensor_store import check_same_structure, checkpoint_linear_combination, flatten_checkpoint
from tta_sim import SimConfig, adapt_step, generate_stream, make_toy_model, mse

logger = logging.getLogger(__name__)


class LmcPoint(NamedTuple):
    lam: float
    loss: float
    interpolated: float
    deviation: float


class LmcReport(NamedTuple):
    max_deviation: float
    curve: tuple


def lmc_barrier(theta_a, theta_b, loss_fn, grid_points=11):
    """Max over lambda in a uniform grid of L(mix) minus the straight line between endpoint losses."""
    if int(grid_points) < 3:
        raise ParameterError(f"grid_points must be >= 3, got {grid_points}")
    check_same_structure([theta_a, theta_b])
    loss_a, loss_b = float(loss_fn(theta_a)), float(loss_fn(theta_b))
    curve = []
    for j in range(int(grid_points)):
        lam = j / (grid_points - 1)
        mix = checkpoint_linear_combination([(1.0 - lam, theta_a), (lam, theta_b)])
        loss = float(loss_fn(mix))
        line = (1.0 - lam) * loss_a + lam * loss_b
        curve.append(LmcPoint(lam, loss, line, loss - line))
    if not all(math.isfinite(p.loss) for p in curve):
        raise NumericalError("loss is not finite along the interpolation path")
    return LmcReport(max(p.deviation for p in curve), tuple(curve))


def toy_lmc_pair(cfg, sim=None, n_epochs=3):
    """
    Two heads fine-tuned from the same source head on the same unshifted data,
    visiting the batches in different seeded orders. Returns (a, b, loss_fn).
    """
    sim = sim or SimConfig()
    cfg = replace(cfg, shift_schedule=())
    batches = generate_stream(cfg)
    model = make_toy_model(cfg, sim)
    heads = []
    for run in range(2):
        rng = make_rng(cfg.seed, 100 + run)
        head = model.head
        for _ in range(n_epochs):
            for index in rng.permutation(len(batches)):
                head = adapt_step(model.with_head(head), batches[index], sim.n_grad_steps, sim.lr,
                                  ridge_lambda=sim.head_lambda, fit_bias=sim.fit_bias)
        heads.append(head)
    Z = np.concatenate([model.features(x) for x, _ in batches])
    y = np.concatenate([labels for _, labels in batches])
    return heads[0], heads[1], lambda ckpt: mse(ckpt, Z, y)


def hessian_rls_check(Z, lam, cfg=None):
    """
    Max relative error between z_i^T H^-1 z_i, with H = 2(Z^T Z / c + lambda I)
    formed explicitly, and half the ridge leverage score of z_i.
    """
    Z = require_finite(Z, "fingerprint matrix")
    if Z.ndim != 2 or Z.shape[0] < 1:
        raise ParameterError(f"fingerprint matrix must be non-empty 2-D, got shape {Z.shape}")
    cfg = replace(cfg, ridge_lambda=lam) if cfg is not None else ScoringConfig(ridge_lambda=lam)
    n, d_prime = Z.shape
    hessian = 2.0 * (Z.T @ Z / cfg.divisor(n) + lam * np.eye(d_prime))
    solved = scipy.linalg.solve(hessian, Z.T, assume_a="pos")
    quad = np.einsum("ij,ji->i", Z, solved)
    half_scores = ridge_leverage_scores(Z, cfg) / 2.0
    denom = np.maximum(np.abs(half_scores), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(quad - half_scores) / denom))


#############################
# Fingerprint / weight correlation
#############################

class CorrelationReport(NamedTuple):
    pearson_r: float
    kendall_tau: float
    fingerprint_distances: tuple
    weight_distances: tuple
    degenerate: bool

    @property
    def pairs(self):
        return len(self.fingerprint_distances)


def pearson_r(a, b):
    """Pearson r from scipy; 0 when either side has no variance."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return 0.0
    return float(stats.pearsonr(a, b)[0])


def kendall_tau(a, b):
    """Pair-counting tau: (concordant - discordant) / all pairs; ties count as neither."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    m = a.size
    if m < 2:
        return 0.0
    upper = np.triu(np.ones((m, m), dtype=bool), k=1)
    agreement = np.sign(np.subtract.outer(a, a)) * np.sign(np.subtract.outer(b, b))
    return float(agreement[upper].sum() / (m * (m - 1) / 2))


def pairwise_distances(rows):
    rows = np.asarray(rows, dtype=np.float64)
    i, j = np.triu_indices(rows.shape[0], k=1)
    return np.linalg.norm(rows[i] - rows[j], axis=1)


def correlate_distances(a, b):
    degenerate = bool(np.ptp(a) == 0 or np.ptp(b) == 0) if len(a) else True
    if degenerate:
        logger.warning("Distances have zero variance; reporting correlation 0")
        return CorrelationReport(0.0, 0.0, tuple(a), tuple(b), True)
    return CorrelationReport(pearson_r(a, b), kendall_tau(a, b), tuple(a), tuple(b), False)


def fingerprint_weight_correlation(codebook):
    entries = codebook.snapshot()
    if len(entries) < 3:
        raise StateError(f"correlation needs at least 3 codebook entries, got {len(entries)}")
    fingerprints = codebook.fingerprint_matrix(entries)
    weights = [flatten_checkpoint(codebook.resolve(entry)) for entry in entries]
    report = correlate_distances(pairwise_distances(fingerprints), pairwise_distances(weights))
    logger.info(f"Correlation over {report.pairs} pairs: pearson={report.pearson_r:.4f} kendall={report.kendall_tau:.4f}")
    return report
