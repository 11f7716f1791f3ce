import numpy as np
import pytest

from errors import ErrorCode, NormError
from numeric_core.arrays import (affine, as_batch, channel_moments, flatten_samples,
                                 sample_features, standardize)


def loop_moments(batch, mask=None):
    n, c, h, w = batch.shape
    rows = [i for i in range(n) if mask is None or mask[i]]
    means, variances = [], []
    for ch in range(c):
        values = [batch[i, ch, y, x] for i in rows for y in range(h) for x in range(w)]
        mean = sum(values) / len(values)
        means.append(mean)
        variances.append(sum((v - mean) ** 2 for v in values) / len(values))
    return np.array(means), np.array(variances)


def test_constant_single_sample():
    batch = np.full((1, 3, 2, 2), 4.5)
    mean, var = channel_moments(batch)
    np.testing.assert_array_equal(mean, [4.5, 4.5, 4.5])
    np.testing.assert_array_equal(var, [0.0, 0.0, 0.0])


def test_symmetric_pair():
    mean, var = channel_moments(as_batch([[0.0], [2.0]]))
    np.testing.assert_allclose(mean, [1.0])
    np.testing.assert_allclose(var, [1.0])


def test_masked_moments_match_loop(make_rng):
    batch = make_rng(7).normal(size=(4, 2, 1, 1))
    mask = np.array([True, False, True, False])
    mean, var = channel_moments(batch, mask)
    expected_mean, expected_var = loop_moments(batch, mask)
    np.testing.assert_allclose(mean, expected_mean, rtol=1e-12)
    np.testing.assert_allclose(var, expected_var, rtol=1e-12)


def test_moments_match_loop_randomized(rng):
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=4))
        batch = rng.normal(loc=rng.normal(), scale=rng.uniform(0.1, 5), size=shape)
        mean, var = channel_moments(batch)
        expected_mean, expected_var = loop_moments(batch)
        np.testing.assert_allclose(mean, expected_mean, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(var, expected_var, rtol=1e-10, atol=1e-12)


def test_empty_selection():
    with pytest.raises(NormError) as info:
        channel_moments(np.ones((3, 1, 1, 1)), np.zeros(3, dtype=bool))
    assert info.value.code is ErrorCode.EMPTY_SELECTION


def test_non_finite_input():
    batch = np.ones((2, 1, 1, 1))
    batch[1, 0, 0, 0] = np.nan
    with pytest.raises(NormError) as info:
        channel_moments(batch)
    assert info.value.code is ErrorCode.NON_FINITE
    with pytest.raises(NormError) as info:
        as_batch([[1.0], [np.inf]])
    assert info.value.code is ErrorCode.NON_FINITE


def test_standardize_hand_value():
    out = standardize(as_batch([[0.0], [2.0]]), [1.0], [1.0], 3.0)
    np.testing.assert_allclose(out.reshape(-1), [-0.5, 0.5])


def test_standardize_identity_parameters(rng):
    batch = rng.normal(size=(5, 3, 2, 2))
    out = standardize(batch, np.zeros(3), np.ones(3), 1e-12)
    np.testing.assert_allclose(out, batch, rtol=1e-10)


def test_standardize_with_own_moments(rng):
    batch = rng.normal(loc=3.0, scale=2.0, size=(16, 4, 3, 3))
    mean, var = channel_moments(batch)
    out = standardize(batch, mean, var, 1e-8 * var.max())
    out_mean, out_var = channel_moments(out)
    np.testing.assert_allclose(out_mean, 0.0, atol=1e-6)
    np.testing.assert_allclose(out_var, 1.0, atol=1e-4)


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_standardize_rejects_bad_epsilon(eps):
    with pytest.raises(NormError) as info:
        standardize(np.ones((2, 1, 1, 1)), [0.0], [1.0], eps)
    assert info.value.code is ErrorCode.BAD_EPSILON


def test_affine_cases():
    batch = as_batch([[0.0], [0.5], [1.0]])
    np.testing.assert_allclose(affine(batch, [2.0], [-1.0]).reshape(-1), [-1.0, 0.0, 1.0])
    np.testing.assert_array_equal(affine(batch, [1.0], [0.0]), batch)
    np.testing.assert_array_equal(affine(batch, [0.0], [3.0]).reshape(-1), [3.0, 3.0, 3.0])


def test_affine_shape_mismatch():
    with pytest.raises(NormError) as info:
        affine(np.ones((2, 3, 1, 1)), np.ones(2), np.zeros(3))
    assert info.value.code is ErrorCode.SHAPE_MISMATCH


def test_affine_standardize_linear_law(rng):
    batch = rng.normal(size=(6, 2, 2, 2))
    mean, var = np.array([0.3, -0.2]), np.array([1.5, 0.7])
    scale, shift = np.array([2.0, -1.0]), np.array([0.5, 0.25])
    eps = 1e-5
    a, b = 3.0, -2.0
    f = affine(standardize(a * batch + b, mean, var, eps), scale, shift)
    g = affine(standardize(batch, mean, var, eps), scale, shift)
    inv = 1.0 / np.sqrt(var + eps)
    # f - shift = scale * inv * (a x + b - mean); g - shift = scale * inv * (x - mean)
    expected = (a * (g - shift[None, :, None, None])
                + (scale * inv * (b + (a - 1.0) * mean))[None, :, None, None]
                + shift[None, :, None, None])
    np.testing.assert_allclose(f, expected, rtol=1e-10, atol=1e-12)


def test_vector_batches_and_views():
    batch = as_batch(np.arange(6.0).reshape(3, 2))
    assert batch.shape == (3, 2, 1, 1)
    np.testing.assert_array_equal(flatten_samples(batch), np.arange(6.0).reshape(3, 2))
    np.testing.assert_array_equal(sample_features(np.ones((2, 3, 2, 2))), np.ones((2, 3)))
