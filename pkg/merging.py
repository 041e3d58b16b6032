# merging.py
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from helpers import ParameterError
from tensor_store import (
    Checkpoint,
    Tensor,
    check_same_structure,
    checkpoint_linear_combination,
)

logger = logging.getLogger(__name__)

TIE_BREAKS = ("highest_score_sign", "zero")
WEIGHT_SUM_TOLERANCE = 1e-9


@dataclass(frozen=True)
class SignPolicy:
    """Majority-sign rules. Zeros never vote; an all-zero coordinate merges to 0."""
    tie_break: str = "highest_score_sign"
    renormalize_per_coordinate: bool = False

    def __post_init__(self):
        if self.tie_break not in TIE_BREAKS:
            raise ParameterError(f"tie_break must be one of {TIE_BREAKS}, got {self.tie_break!r}")


def _check_weights(weights, count, allow_negative):
    weights = np.asarray([float(w) for w in weights], dtype=np.float64)
    if weights.size != count:
        raise ParameterError(f"got {weights.size} weights for {count} checkpoints")
    if not np.all(np.isfinite(weights)):
        raise ParameterError("merge weights must be finite")
    if not allow_negative and np.any(weights < 0):
        raise ParameterError("sign-consistent merge does not accept negative weights")
    total = math.fsum(weights)
    if abs(total - 1.0) > WEIGHT_SUM_TOLERANCE:
        raise ParameterError(f"merge weights sum to {total}, expected 1")
    return weights


def majority_signs(stack, weights, policy):
    """Per-coordinate majority sign of a (K, n) stack; 0 where no sign wins."""
    signs = np.sign(stack)
    positive = (signs > 0).sum(axis=0)
    negative = (signs < 0).sum(axis=0)
    majority = np.sign(positive - negative).astype(np.float64)
    tied = (positive == negative) & (positive > 0)
    if policy.tie_break == "highest_score_sign" and np.any(tied):
        # Highest weight among the non-zero voters at each tied coordinate.
        voting = np.where(signs != 0, weights[:, None], -np.inf)
        top = voting.max(axis=0)
        holders = (voting == top) & (signs != 0)
        pos_top = (holders & (signs > 0)).any(axis=0)
        neg_top = (holders & (signs < 0)).any(axis=0)
        # Both signs holding the top weight stays unresolved (0).
        resolved = np.where(pos_top & ~neg_top, 1.0, np.where(neg_top & ~pos_top, -1.0, 0.0))
        majority = np.where(tied, resolved, majority)
    return majority


def _merge_tensor(stack, weights, policy):
    majority = majority_signs(stack, weights, policy)
    mask = (np.sign(stack) == majority) & (majority != 0)
    masked = np.where(mask, stack, 0.0)
    merged = (weights[:, None] * masked).sum(axis=0)
    if policy.renormalize_per_coordinate:
        kept = (weights[:, None] * mask).sum(axis=0)
        merged = np.divide(merged, kept, out=np.zeros_like(merged), where=kept > 0)
    return merged


def _merge_workers():
    return max(1, int(os.getenv("CODEMERGE_MERGE_WORKERS", 1)))


def sign_consistent_merge(checkpoints, weights, policy=None, max_workers=None):
    """
    Weighted merge keeping only contributions that agree with the majority sign.

    Works one parameter tensor at a time so peak memory stays at K copies of the
    largest tensor. Tensors may be merged on a thread pool; the result keeps the
    input name order.
    """
    policy = policy or SignPolicy()
    checkpoints = list(checkpoints)
    reference = check_same_structure(checkpoints)
    w = _check_weights(weights, len(checkpoints), allow_negative=False)

    def merge_one(name):
        stack = np.stack([c[name].data.astype(np.float64) for c in checkpoints])
        return Tensor(reference[name].dims, _merge_tensor(stack, w, policy).astype(np.float32))

    workers = max_workers or _merge_workers()
    if workers > 1 and len(reference) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tensors = list(pool.map(merge_one, reference.names))
    else:
        tensors = [merge_one(name) for name in reference.names]
    merged = Checkpoint(max(c.step for c in checkpoints), zip(reference.names, tensors))
    logger.debug(f"Sign-consistent merge of {len(checkpoints)} checkpoints -> step {merged.step}")
    return merged


def weighted_average_merge(checkpoints, weights):
    """Plain weighted sum; weights may be negative but must sum to 1."""
    checkpoints = list(checkpoints)
    check_same_structure(checkpoints)
    w = _check_weights(weights, len(checkpoints), allow_negative=True)
    return checkpoint_linear_combination(zip(w, checkpoints))


def ema_update(prev, new, beta):
    if not 0.0 < beta < 1.0:
        raise ParameterError(f"beta must lie strictly inside (0, 1), got {beta}")
    return checkpoint_linear_combination([(beta, prev), (1.0 - beta, new)])
