import numpy as np
import pytest

from iwmfdiff.core import rng_stream
from iwmfdiff.filters import FilterConfig, iwmf
from iwmfdiff.verifier import (ToyExtractor, cosine_similarity, extract, first_conv_response,
                               grad_loss_wrt_input, loss_and_grad, make_extractor)


@pytest.fixture(scope="module")
def model():
    return make_extractor(0)


def _fd_check(model, x, target, n_coords=40, h=1e-4, seed=0):
    loss, grad = loss_and_grad(model, x, target)
    rng = rng_stream(seed)
    worst = 0.0
    for _ in range(n_coords):
        idx = tuple(int(rng.integers(0, d)) for d in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (loss_and_grad(model, xp, target)[0] - loss_and_grad(model, xm, target)[0]) / (2 * h)
        worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), abs(grad[idx]), 1e-8))
    return worst


def test_embedding_is_unit_norm(model):
    x = rng_stream(1).uniform(0, 1, (5, 3, 32, 32))
    e = extract(model, x)
    assert e.shape == (5, model.dim)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(extract(model, x[2]), e[2], atol=1e-14)


def test_same_seed_same_weights():
    a, b = make_extractor(3), make_extractor(3)
    assert np.array_equal(a.kernels, b.kernels) and np.array_equal(a.projection, b.projection)
    assert not np.array_equal(a.kernels, make_extractor(4).kernels)


def test_gradient_matches_finite_differences(model):
    for k in range(4):
        rng = rng_stream([7, k])
        x = rng.uniform(0, 1, (3, 32, 32))
        target = extract(model, rng.uniform(0, 1, (3, 32, 32)))
        assert _fd_check(model, x, target, seed=k) < 1e-3


def test_batch_gradient_equals_single(model):
    x = rng_stream(2).uniform(0, 1, (3, 3, 32, 32))
    t = extract(model, rng_stream(3).uniform(0, 1, (3, 32, 32)))
    loss, grad = loss_and_grad(model, x, t)
    for k in range(3):
        lk, gk = loss_and_grad(model, x[k], t)
        assert lk == pytest.approx(loss[k], rel=1e-12)
        np.testing.assert_allclose(gk, grad[k], rtol=1e-10, atol=1e-14)
    np.testing.assert_array_equal(grad_loss_wrt_input(model, x, t), grad)


def test_zero_distance_gives_zero_gradient(model):
    x = rng_stream(4).uniform(0, 1, (3, 32, 32))
    loss, grad = loss_and_grad(model, x, extract(model, x))
    assert loss == pytest.approx(0.0, abs=1e-7)
    assert grad.shape == x.shape and not np.any(np.isnan(grad))


def test_first_conv_is_linear(model):
    rng = rng_stream(5)
    a, b = rng.uniform(0, 1, (2, 3, 32, 32))
    lhs = first_conv_response(model, 0.3 * a + 0.7 * b)
    rhs = 0.3 * first_conv_response(model, a) + 0.7 * first_conv_response(model, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    assert lhs.shape == (model.kernels.shape[0], *model.conv_shape)


def test_small_perturbation_changes_similarity_little(model):
    rng = rng_stream(6)
    x = rng.uniform(0, 1, (50, 3, 32, 32))
    noisy = np.clip(x + 0.03 * np.sign(rng.standard_normal(x.shape)), 0, 1)
    drop = 1 - cosine_similarity(extract(model, x), extract(model, noisy))
    assert np.mean(drop) < 0.5


def test_blur_keeps_identity_closer_than_a_stranger(model):
    x = np.stack([rng_stream([8, i]).uniform(0, 1, (3, 32, 32)) for i in range(100)])
    y = np.stack([rng_stream([9, i]).uniform(0, 1, (3, 32, 32)) for i in range(100)])
    blurred = np.stack([iwmf(xi, FilterConfig(lam=0.25, seed=i)) for i, xi in enumerate(x)])
    same = cosine_similarity(extract(model, x), extract(model, blurred))
    other = cosine_similarity(extract(model, x), extract(model, y))
    assert np.mean(same > other) >= 0.95 and np.mean(same) > np.mean(other)


def test_cosine_similarity_scalar_and_rows():
    e = np.eye(3)
    assert cosine_similarity(e[0], e[0]) == 1.0
    np.testing.assert_array_equal(cosine_similarity(e, e[::-1]), [0.0, 1.0, 0.0])


def test_wrong_shape_rejected(model):
    with pytest.raises(ValueError):
        extract(model, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        make_extractor(0, input_shape=(3, 6, 6))


def test_save_load_round_trip(tmp_path, model):
    model.save(tmp_path / "w")
    back = ToyExtractor.load(tmp_path / "w")
    assert np.array_equal(back.kernels, model.kernels)
    assert np.array_equal(back.projection, model.projection)
    x = rng_stream(9).uniform(0, 1, (3, 32, 32))
    assert np.array_equal(extract(back, x), extract(model, x))


def test_larger_input_supported():
    big = make_extractor(1, input_shape=(3, 112, 112))
    x = rng_stream(0).uniform(0, 1, (3, 112, 112))
    assert extract(big, x).shape == (32,)
