# scoring.py
import json
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.cluster.vq import kmeans2

from helpers import NumericalError, ParameterError, StateError, make_rng, require_finite

logger = logging.getLogger(__name__)

DIVISOR_MODES = ("row_count", "fixed")
SELECTIONS = ("leverage", "recent", "random", "kmeans_pp")
# Above this condition number the jittered kernel is treated as singular.
MAX_KERNEL_CONDITION = 1e12


@dataclass(frozen=True)
class ScoringConfig:
    ridge_lambda: float = 1e-2
    divisor_mode: str = "row_count"
    top_k: int = 5
    ema_beta: float = 0.99
    kernel_jitter: float = 1e-6
    clamp_negative: bool = False
    selection: str = "leverage"
    include_latest: bool = True
    window: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.ridge_lambda) and self.ridge_lambda > 0):
            raise ParameterError(f"ridge lambda must be > 0, got {self.ridge_lambda}")
        if self.divisor_mode not in DIVISOR_MODES:
            raise ParameterError(f"divisor_mode must be one of {DIVISOR_MODES}, got {self.divisor_mode!r}")
        if int(self.top_k) < 1:
            raise ParameterError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 < self.ema_beta < 1.0:
            raise ParameterError(f"ema_beta must lie strictly inside (0, 1), got {self.ema_beta}")
        if not (math.isfinite(self.kernel_jitter) and self.kernel_jitter >= 0):
            raise ParameterError(f"kernel_jitter must be >= 0, got {self.kernel_jitter}")
        if self.selection not in SELECTIONS:
            raise ParameterError(f"selection must be one of {SELECTIONS}, got {self.selection!r}")
        if self.window is not None and int(self.window) < 1:
            raise ParameterError(f"window must be >= 1, got {self.window}")

    def divisor(self, n_rows):
        return float(n_rows) if self.divisor_mode == "row_count" else float(self.top_k)


@dataclass(frozen=True)
class MergePlan:
    """Selected steps with their raw scores and normalized weights, each in (0, 1]."""
    selected_steps: tuple
    raw_scores: tuple
    weights: tuple

    signed_weights = False

    def __post_init__(self):
        if not (len(self.selected_steps) == len(self.raw_scores) == len(self.weights)):
            raise ParameterError("merge plan fields must be aligned")
        if not self.selected_steps:
            raise ParameterError("merge plan must select at least one checkpoint")
        if abs(math.fsum(self.weights) - 1.0) > 1e-9:
            raise ParameterError(f"merge plan weights sum to {math.fsum(self.weights)}, expected 1")
        if not self.signed_weights and not all(0.0 < w <= 1.0 for w in self.weights):
            raise ParameterError(f"merge plan weights must lie in (0, 1], got {list(self.weights)}")

    @property
    def weight_sum(self):
        return math.fsum(self.weights)

    def to_json(self):
        return json.dumps({
            "steps": list(self.selected_steps),
            "scores": list(self.raw_scores),
            "weights": list(self.weights),
            "weight_sum": self.weight_sum,
        })


@dataclass(frozen=True)
class SynergyPlan(MergePlan):
    """Kernel-synergy plan; weights still sum to 1 but may be zero or negative."""
    signed_weights = True


#############################
# Ridge leverage scores
#############################

def ridge_leverage_scores(Z, cfg, form="auto"):
    """
    s_i = z_i^T (Z^T Z / c + lambda I)^-1 z_i for every row of Z.

    Uses the eigendecomposition of whichever Gram form is smaller: the d' x d'
    covariance (primal) or the n x n row Gram matrix (dual).
    """
    Z = require_finite(Z, "fingerprint matrix")
    if Z.ndim != 2 or Z.shape[0] < 1 or Z.shape[1] < 1:
        raise ParameterError(f"fingerprint matrix must be a non-empty 2-D array, got shape {Z.shape}")
    n, d_prime = Z.shape
    lam = cfg.ridge_lambda
    c = cfg.divisor(n)
    if form == "auto":
        form = "dual" if n < d_prime else "primal"
    if form == "primal":
        evals, evecs = scipy.linalg.eigh(Z.T @ Z / c)
        evals = np.clip(evals, 0.0, None)
        proj = Z @ evecs
        scores = (proj ** 2 / (evals + lam)).sum(axis=1)
    elif form == "dual":
        # Push-through identity: Z M^-1 Z^T = c * G (G + c*lambda I)^-1 with G = Z Z^T.
        evals, evecs = scipy.linalg.eigh(Z @ Z.T)
        evals = np.clip(evals, 0.0, None)
        scores = c * (evecs ** 2 * (evals / (evals + c * lam))).sum(axis=1)
    else:
        raise ParameterError(f"unknown form {form!r}")
    return scores


def make_merge_plan(scores, steps, k):
    """Top-k by score (ties to the older step); zero scores carry no weight and are never picked."""
    if int(k) < 1:
        raise ParameterError(f"K must be >= 1, got {k}")
    scores = require_finite(scores, "scores").reshape(-1)
    steps = [int(s) for s in steps]
    if scores.size == 0 or scores.size != len(steps):
        raise ParameterError("scores and steps must be aligned and non-empty")
    positive = [i for i in range(len(steps)) if scores[i] > 0]
    order = sorted(positive, key=lambda i: (-scores[i], steps[i]))[: int(k)]
    if not order:
        raise ParameterError("selected scores must have a positive sum")
    chosen = np.array([scores[i] for i in order])
    total = chosen.sum()
    return MergePlan(
        selected_steps=tuple(steps[i] for i in order),
        raw_scores=tuple(float(s) for s in chosen),
        weights=tuple(float(w) for w in chosen / total),
    )


def _select_other(cfg, Z, steps, k, rng):
    """Indices of up to k rows picked by a non-leverage strategy."""
    n = len(steps)
    if k >= n:
        return list(range(n))
    if cfg.selection == "recent":
        return list(range(n - k, n))
    if cfg.selection == "random":
        return sorted(rng.choice(n, size=k, replace=False).tolist())
    # kmeans_pp: nearest distinct row to each centroid
    centroids, _ = kmeans2(Z, k, minit="++", seed=int(rng.integers(2 ** 32)))
    chosen = []
    for centroid in centroids:
        dist = ((Z - centroid) ** 2).sum(axis=1)
        dist[chosen] = np.inf
        chosen.append(int(np.argmin(dist)))
    return sorted(chosen)


def plan_from_codebook(codebook, cfg, rng=None):
    """
    Score the stored fingerprints and pick up to top_k checkpoints.

    With include_latest the newest entry is always part of the plan and the
    strategy fills the remaining slots from the older entries.
    """
    entries = codebook.snapshot()
    if not entries:
        raise StateError("cannot plan a merge from an empty codebook")
    if cfg.window is not None:
        entries = entries[-int(cfg.window):]
    steps = [entry.step for entry in entries]
    Z = codebook.fingerprint_matrix(entries)
    k = int(cfg.top_k)

    if cfg.selection == "leverage":
        scores = ridge_leverage_scores(Z, cfg)
        if not cfg.include_latest:
            return make_merge_plan(scores, steps, k)
        keep = [len(steps) - 1]
        if k > 1 and np.any(scores[:-1] > 0):
            older = make_merge_plan(scores[:-1], steps[:-1], k - 1)
            keep += [steps.index(s) for s in older.selected_steps]
        return make_merge_plan(scores[keep], [steps[i] for i in keep], k)

    rng = rng if rng is not None else make_rng(cfg.seed, len(steps))
    if cfg.include_latest:
        picked = [len(steps) - 1]
        if k > 1 and len(steps) > 1:
            picked += _select_other(cfg, Z[:-1], steps[:-1], k - 1, rng)
    else:
        picked = _select_other(cfg, Z, steps, k, rng)
    return make_merge_plan(np.ones(len(picked)), [steps[i] for i in picked], k)


#############################
# Baseline weights
#############################

def ema_weights(t, beta):
    """Unrolled EMA weights over steps 0..t with the recursion seeded at step 0."""
    t = int(t)
    if t < 0:
        raise ParameterError(f"t must be >= 0, got {t}")
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie strictly inside (0, 1), got {beta}")
    exponents = t - np.arange(t + 1)
    weights = (1.0 - beta) * np.power(beta, exponents.astype(np.float64))
    weights[0] = beta ** t
    return weights


def ema_weights_recursive(t, beta):
    weights = np.array([1.0])
    for _ in range(int(t)):
        weights = np.append(beta * weights, 1.0 - beta)
    return weights


def cosine_similarity_matrix(vectors):
    mat = require_finite(vectors, "similarity inputs")
    if mat.ndim != 2:
        raise ParameterError("similarity inputs must be a list of equal-length vectors")
    norms = np.linalg.norm(mat, axis=1)
    sims = mat @ mat.T
    denom = np.outer(norms, norms)
    # Zero vectors have similarity 0 with everything.
    return np.divide(sims, denom, out=np.zeros_like(sims), where=denom > 0)


def kernel_weights(kernel, jitter=1e-6, clamp_negative=False):
    """Normalized row sums of (kernel + jitter I)^-1."""
    kernel = require_finite(kernel, "kernel")
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] < 1:
        raise ParameterError(f"kernel must be square and non-empty, got shape {kernel.shape}")
    k = kernel.shape[0]
    jittered = kernel + jitter * np.eye(k)
    hint = f"kernel is singular with jitter={jitter}; increase kernel_jitter"
    if np.linalg.cond(jittered) > MAX_KERNEL_CONDITION:
        raise NumericalError(hint)
    try:
        row_sums = scipy.linalg.solve(jittered, np.ones(k), assume_a="sym")
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise NumericalError(hint)
    if clamp_negative and np.any(row_sums < 0):
        logger.warning(f"Clamping {int((row_sums < 0).sum())} negative synergy weights to zero")
        row_sums = np.clip(row_sums, 0.0, None)
    total = row_sums.sum()
    if not np.isfinite(total) or abs(total) < 1e-300:
        raise NumericalError(f"synergy weights do not normalize; {hint}")
    return row_sums / total


def mos_weights(outputs, features, jitter=1e-6, clamp_negative=False):
    outputs = np.asarray(outputs, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if outputs.ndim != 2 or features.ndim != 2 or outputs.shape[0] != features.shape[0]:
        raise ParameterError("outputs and features must be K equal-length vectors each")
    kernel = cosine_similarity_matrix(outputs) * cosine_similarity_matrix(features)
    return kernel_weights(kernel, jitter=jitter, clamp_negative=clamp_negative)
