import numpy as np
import pytest

from fingerprint import Fingerprint, compute_fingerprint, make_projection, pool_features
from helpers import ParameterError
from tensor_store import Tensor


def test_projection_is_deterministic():
    assert make_projection(8, 8, 7) == make_projection(8, 8, 7)
    assert make_projection(8, 8, 7) != make_projection(8, 8, 8)


def test_projection_second_moment():
    d, d_prime = 4096, 1024
    entries = make_projection(d, d_prime, 0).entries
    squared = entries.reshape(-1) ** 2
    stderr = squared.std() / np.sqrt(squared.size)
    assert abs(squared.mean() - 1.0 / d_prime) < 3 * stderr


def test_projection_mean_is_centered():
    entries = make_projection(256, 64, 3).entries.reshape(-1)
    assert abs(entries.mean()) < 4 * entries.std() / np.sqrt(entries.size)


@pytest.mark.parametrize("d, d_prime, seed", [(2, 4, 0), (0, 0, 0), (4, 0, 0), (4, 2, -1), (4, 2, 2 ** 64)])
def test_projection_rejects_bad_parameters(d, d_prime, seed):
    with pytest.raises(ParameterError):
        make_projection(d, d_prime, seed)


def test_pool_vector_is_identity():
    assert pool_features([1.0, 2.0, 3.0]).tolist() == [1.0, 2.0, 3.0]


def test_pool_hand_mean():
    assert pool_features([[1.0, 3.0], [5.0, 7.0]]).tolist() == [3.0, 5.0]


def test_pool_zero_map():
    pooled = pool_features(np.zeros((10, 16)))
    assert pooled.shape == (16,)
    assert not pooled.any()


def test_pool_accepts_tensors_and_higher_rank():
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    np.testing.assert_allclose(pool_features(Tensor.from_array(arr)), arr.reshape(-1, 4).mean(axis=0))


def test_pool_rejects_empty():
    with pytest.raises(ParameterError):
        pool_features(np.zeros((0, 3)))


def test_zero_features_give_zero_fingerprint():
    fp = compute_fingerprint(np.zeros(16), make_projection(16, 4, 1), step=2)
    assert fp.step == 2
    assert not fp.values.any()


def test_basis_vector_extracts_projection_row():
    projection = make_projection(16, 4, 1)
    features = np.zeros(16)
    features[0] = 1.0
    fp = compute_fingerprint(features, projection, step=0)
    np.testing.assert_array_equal(fp.values, projection.entries[0].astype(np.float32))


def test_different_seeds_give_different_fingerprints():
    features = np.random.default_rng(0).standard_normal(64)
    a = compute_fingerprint(features, make_projection(64, 16, 1), step=1)
    b = compute_fingerprint(features, make_projection(64, 16, 2), step=1)
    assert a != b
    assert compute_fingerprint(features, make_projection(64, 16, 1), step=1) == a


def test_length_mismatch_is_rejected():
    with pytest.raises(ParameterError):
        compute_fingerprint(np.ones(8), make_projection(16, 4, 0), step=0)


def test_fingerprint_validation():
    with pytest.raises(ParameterError):
        Fingerprint(-1, [1.0])
    with pytest.raises(ParameterError):
        Fingerprint(0, [])
    with pytest.raises(ParameterError):
        Fingerprint(0, [np.nan])
    assert Fingerprint(0, [3.0, 4.0]).norm() == 5.0


def test_fingerprint_is_linear_in_the_features():
    rng = np.random.default_rng(21)
    projection = make_projection(64, 16, 5)
    for _ in range(50):
        u, v = rng.standard_normal(64), rng.standard_normal(64)
        a, b = rng.uniform(-3.0, 3.0, size=2)
        fu = compute_fingerprint(u, projection, step=0).values.astype(np.float64)
        fv = compute_fingerprint(v, projection, step=0).values.astype(np.float64)
        mixed = compute_fingerprint(a * u + b * v, projection, step=0).values.astype(np.float64)
        scale = abs(a) * np.linalg.norm(fu) + abs(b) * np.linalg.norm(fv)
        assert np.linalg.norm(mixed - (a * fu + b * fv)) <= 1e-5 * scale


def test_projection_preserves_squared_norms_on_average():
    rng = np.random.default_rng(22)
    projection = make_projection(512, 128, 0)
    units = rng.standard_normal((100, 512))
    units /= np.linalg.norm(units, axis=1, keepdims=True)
    norms = [compute_fingerprint(u, projection, step=0).norm() ** 2 for u in units]
    assert 0.8 <= np.mean(norms) <= 1.2
