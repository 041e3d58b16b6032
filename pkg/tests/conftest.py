import numpy as np
import pytest

from codebook import Codebook
from fingerprint import Fingerprint
from tensor_store import Checkpoint, Tensor


@pytest.fixture
def random_checkpoint():
    def build(seed, step=0, shapes=None):
        rng = np.random.default_rng(seed)
        shapes = shapes or {"w": (2, 3), "b": (3,)}
        return Checkpoint(step, {name: Tensor.from_array(rng.standard_normal(dims)) for name, dims in shapes.items()})
    return build


@pytest.fixture
def make_codebook(random_checkpoint):
    """Codebook of `n` entries at steps 1..n holding in-memory checkpoints."""
    def build(n, d_prime=4, seed=0, max_entries=None):
        rng = np.random.default_rng(seed)
        codebook = Codebook(d_prime, max_entries=max_entries)
        for step in range(1, n + 1):
            fp = Fingerprint(step, rng.standard_normal(d_prime))
            codebook.append(fp, random_checkpoint(seed * 1000 + step, step=step))
        return codebook
    return build
