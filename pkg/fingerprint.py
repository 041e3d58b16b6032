# fingerprint.py
"""
Compact fingerprints: mean-pooled features pushed through a fixed Gaussian projection.

The projection is generated from numpy's Philox-4x64 counter-based bit generator,
keyed directly with the seed (counter starting at zero). Uniform draws are turned
into normals with the Box–Muller transform, cosine branch and sine branch
interleaved, and the d x d' matrix is filled row-major. The entries are scaled
by 1/sqrt(d') so the projection preserves squared norms in expectation.
"""
import logging
from dataclasses import dataclass

import numpy as np

from helpers import ParameterError, require_finite
from tensor_store import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    d: int
    d_prime: int
    seed: int
    entries: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, ProjectionMatrix):
            return NotImplemented
        return (
            (self.d, self.d_prime, self.seed) == (other.d, other.d_prime, other.seed)
            and np.array_equal(self.entries, other.entries)
        )


@dataclass(frozen=True, eq=False)
class Fingerprint:
    step: int
    values: np.ndarray

    def __post_init__(self):
        if int(self.step) < 0:
            raise ParameterError(f"fingerprint step must be non-negative, got {self.step}")
        values = np.array(self.values, dtype=np.float32).reshape(-1)
        if values.size == 0:
            raise ParameterError("fingerprint must have at least one value")
        if not np.all(np.isfinite(values)):
            raise ParameterError("fingerprint values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "step", int(self.step))
        object.__setattr__(self, "values", values)

    @property
    def d_prime(self):
        return self.values.size

    def norm(self):
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def __eq__(self, other):
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.step == other.step and np.array_equal(
            self.values.view(np.uint32), other.values.view(np.uint32)
        )


def box_muller_normals(rng, count):
    pairs = (count + 1) // 2
    u = rng.random((pairs, 2))
    # 1 - u maps [0, 1) onto (0, 1], keeping log finite.
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * np.pi * u[:, 1]
    normals = np.empty((pairs, 2), dtype=np.float64)
    normals[:, 0] = radius * np.cos(angle)
    normals[:, 1] = radius * np.sin(angle)
    return normals.reshape(-1)[:count]


def make_projection(d, d_prime, seed):
    d, d_prime, seed = int(d), int(d_prime), int(seed)
    if d < 1 or d_prime < 1:
        raise ParameterError(f"projection dims must be positive, got d={d}, d_prime={d_prime}")
    if d_prime > d:
        raise ParameterError(f"d_prime ({d_prime}) must not exceed d ({d})")
    if not 0 <= seed < 2 ** 64:
        raise ParameterError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    entries = box_muller_normals(rng, d * d_prime).reshape(d, d_prime) / np.sqrt(d_prime)
    entries.setflags(write=False)
    logger.debug(f"Generated {d}x{d_prime} projection for seed {seed}")
    return ProjectionMatrix(d=d, d_prime=d_prime, seed=seed, entries=entries)


def pool_features(feature_map):
    """Mean over every leading dimension; the last dimension is the feature axis."""
    arr = feature_map.to_array() if isinstance(feature_map, Tensor) else np.asarray(feature_map, dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("cannot pool an empty feature map")
    if arr.ndim < 1:
        raise ParameterError("feature map must have rank >= 1")
    arr = require_finite(arr, "feature map")
    if arr.ndim == 1:
        return arr.copy()
    return arr.reshape(-1, arr.shape[-1]).mean(axis=0)


def compute_fingerprint(features, projection, step):
    features = require_finite(features, "features").reshape(-1)
    if features.size != projection.d:
        raise ParameterError(
            f"feature length {features.size} does not match projection input dim {projection.d}"
        )
    return Fingerprint(step=step, values=features @ projection.entries)
