# Tests for the reconstruction losses
import pytest
import numpy as np
import sys
import os

# Add the parent directory to the path to import auif modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from auif.core.errors import InvalidInputError
from auif.core.losses import (
    C1,
    C2,
    l2_loss,
    l2_loss_and_grad,
    ssim,
    ssim_and_grads,
    total_loss,
    total_loss_and_grad,
)


@pytest.fixture
def pair():
    rng = np.random.default_rng(21)
    return rng.uniform(size=(32, 32)), rng.uniform(size=(32, 32))


def naive_ssim(a, b, size=11, sigma=1.5):
    offsets = np.arange(size) - size // 2
    g = np.exp(-(offsets[:, None] ** 2 + offsets[None, :] ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    h, w = a.shape
    values = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            ma, mb = np.sum(g * pa), np.sum(g * pb)
            va = np.sum(g * (pa - ma) ** 2)
            vb = np.sum(g * (pb - mb) ** 2)
            cov = np.sum(g * (pa - ma) * (pb - mb))
            values.append(((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    return float(np.mean(values))


# --- l2 ---

def test_l2_identity_and_constant_difference():
    x = np.random.default_rng(0).uniform(size=(4, 4))
    assert l2_loss(x, x) == 0.0
    assert l2_loss(np.zeros((3, 3)), np.ones((3, 3))) == pytest.approx(1.0)
    assert l2_loss(np.zeros((3, 3)), np.ones((3, 3)), normalization="sum") == 9.0


def test_l2_gradient_finite_difference():
    rng = np.random.default_rng(1)
    x, x_hat = rng.uniform(size=(5, 5)), rng.uniform(size=(5, 5))
    _, grad = l2_loss_and_grad(x, x_hat)
    eps = 1e-6
    e = np.zeros_like(x_hat)
    e[2, 3] = eps
    numeric = (l2_loss(x, x_hat + e) - l2_loss(x, x_hat - e)) / (2 * eps)
    assert grad[2, 3] == pytest.approx(numeric, rel=1e-6)


def test_l2_rejects_mismatch_and_bad_normalization():
    with pytest.raises(InvalidInputError):
        l2_loss(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(InvalidInputError):
        l2_loss(np.zeros((3, 3)), np.zeros((3, 3)), normalization="max")


# --- ssim ---

def test_ssim_self_similarity(pair):
    a, _ = pair
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_window_oracle(pair):
    a, b = pair
    assert ssim(a, b) == pytest.approx(naive_ssim(a, b), abs=1e-8)


def test_ssim_is_symmetric_and_below_one(pair):
    a, b = pair
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-10
    perturbed = a.copy()
    perturbed[10:20, 10:20] = np.clip(perturbed[10:20, 10:20] + 0.3, 0, 1)
    assert ssim(a, perturbed) < 1.0


def test_ssim_inverted_checkerboard_is_not_positive():
    board = np.indices((16, 16)).sum(axis=0) % 2 * 1.0
    assert ssim(board, 1.0 - board) <= 0.0
    assert naive_ssim(board, 1.0 - board) <= 0.0


def test_ssim_rejects_small_images():
    with pytest.raises(InvalidInputError):
        ssim(np.zeros((10, 20)), np.zeros((10, 20)))


def test_ssim_gradients_finite_difference():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(13, 14)), rng.uniform(size=(13, 14))
    _, da, db = ssim_and_grads(a, b)
    eps = 1e-6
    for (i, j) in [(0, 0), (6, 7), (12, 13)]:
        e = np.zeros_like(a)
        e[i, j] = eps
        num_a = (ssim(a + e, b) - ssim(a - e, b)) / (2 * eps)
        num_b = (ssim(a, b + e) - ssim(a, b - e)) / (2 * eps)
        assert da[i, j] == pytest.approx(num_a, rel=1e-5, abs=1e-9)
        assert db[i, j] == pytest.approx(num_b, rel=1e-5, abs=1e-9)


def test_ssim_works_on_batches():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 1, 12, 12)), rng.uniform(size=(2, 1, 12, 12))
    expected = np.mean([naive_ssim(a[k, 0], b[k, 0]) for k in range(2)])
    assert ssim(a, b) == pytest.approx(expected, abs=1e-8)


# --- total ---

def test_total_loss_of_perfect_reconstruction(pair):
    a, _ = pair
    assert total_loss(a, a, mu=5).total == pytest.approx(0.0, abs=1e-12)


def test_total_loss_weights(pair):
    a, b = pair
    full = total_loss(a, b, mu=5)
    assert full.total == pytest.approx(full.l2_part + 5 * full.ssim_part)
    assert 0.0 <= full.ssim_part <= 1.0
    l2_only = total_loss(a, b, mu=0)
    assert l2_only.total == l2_only.l2_part
    ssim_only = total_loss(a, b, mu=5, l2_weight=0)
    assert ssim_only.total == 5 * ssim_only.ssim_part
    assert ssim_only.l2_part == 0.0


def test_total_loss_gradient_combines_terms(pair):
    a, b = pair
    _, grad = total_loss_and_grad(a, b, mu=5)
    _, g_l2 = l2_loss_and_grad(a, b)
    _, _, d_hat = ssim_and_grads(a, b)
    np.testing.assert_allclose(grad, g_l2 - 2.5 * d_hat, rtol=1e-12, atol=1e-15)
