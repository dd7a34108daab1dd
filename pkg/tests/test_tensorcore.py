# Tests for the tensor primitives and the finite-difference checker
import pytest
import numpy as np
import sys
import os

# Add the parent directory to the path to import auif modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from auif.core.errors import InvalidInputError
from auif.core.tensorcore import (
    BN_EPS,
    GradCheckCase,
    GradTape,
    batch_norm_backward,
    batch_norm_forward,
    check_gradients,
    conv2d,
    conv2d_backward,
    conv2d_forward,
    merge_grads,
    prelu_forward,
    reflect_pad,
    reflect_pad_backward,
    reflect_pad_forward,
    sigmoid,
    tie_rot180,
)


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def naive_reflect(x, p):
    n, c, h, w = x.shape
    out = np.empty((n, c, h + 2 * p, w + 2 * p))

    def mirror(i, size):
        if size == 1:
            return 0
        if i < 0:
            return -i
        if i >= size:
            return 2 * (size - 1) - i
        return i

    for a in range(n):
        for b in range(c):
            for i in range(h + 2 * p):
                for j in range(w + 2 * p):
                    out[a, b, i, j] = x[a, b, mirror(i - p, h), mirror(j - p, w)]
    return out


def naive_conv(x, k):
    n, c, h, w = x.shape
    o = k.shape[0]
    out = np.zeros((n, o, h - 2, w - 2))
    for a in range(n):
        for m in range(o):
            for i in range(h - 2):
                for j in range(w - 2):
                    total = 0.0
                    for ch in range(c):
                        for r in range(3):
                            for s in range(3):
                                total += x[a, ch, i + r, j + s] * k[m, ch, r, s]
                    out[a, m, i, j] = total
    return out


# --- reflect_pad ---

def test_reflect_pad_single_pixel_is_constant():
    out = reflect_pad(np.full((1, 1, 1, 1), 0.3), 1)
    assert out.shape == (1, 1, 3, 3)
    assert np.all(out == 0.3)


def test_reflect_pad_row_reflect101():
    row = np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3)
    out = reflect_pad(row, 1)
    assert out.shape == (1, 1, 3, 5)
    np.testing.assert_array_equal(out[0, 0, 1], [2.0, 1.0, 2.0, 3.0, 2.0])


def test_reflect_pad_matches_index_oracle(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    np.testing.assert_array_equal(reflect_pad(x, 1), naive_reflect(x, 1))
    np.testing.assert_array_equal(reflect_pad(x, 2), naive_reflect(x, 2))


def test_reflect_pad_rejects_too_small_axis():
    with pytest.raises(InvalidInputError):
        reflect_pad(np.zeros((1, 1, 2, 5)), 2)
    with pytest.raises(InvalidInputError):
        reflect_pad(np.zeros((1, 1, 5, 5)), 0)


def test_reflect_pad_backward_is_adjoint(rng):
    x = rng.standard_normal((2, 1, 4, 6))
    y, cache = reflect_pad_forward(x, 1)
    g = rng.standard_normal(y.shape)
    lhs = np.sum(g * y)
    rhs = np.sum(reflect_pad_backward(g, cache) * x)
    assert lhs == pytest.approx(rhs, rel=1e-12)


# --- conv2d ---

def test_conv2d_identity_kernel_after_padding(rng):
    x = rng.standard_normal((2, 1, 6, 7))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d(reflect_pad(x, 1), k), x)


def test_conv2d_all_ones_window_sum():
    out = conv2d(np.ones((1, 1, 5, 5)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 3, 3)
    np.testing.assert_allclose(out, 9.0)


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    expected = naive_conv(x, k)
    np.testing.assert_allclose(conv2d(x, k), expected, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(InvalidInputError):
        conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)))


def test_conv2d_backward_is_adjoint_in_input(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    k = rng.standard_normal((3, 2, 3, 3))
    y, cache = conv2d_forward(x, k)
    g = rng.standard_normal(y.shape)
    dx, dk = conv2d_backward(g, cache)
    assert np.sum(g * y) == pytest.approx(np.sum(dx * x), rel=1e-10)
    assert np.sum(g * y) == pytest.approx(np.sum(dk * k), rel=1e-10)


def test_pad_then_conv_preserves_spatial_dims(rng):
    x = rng.standard_normal((1, 1, 5, 9))
    assert conv2d(reflect_pad(x, 1), rng.standard_normal((4, 1, 3, 3))).shape == (1, 4, 5, 9)


# --- tie_rot180 ---

def test_tie_rot180_rotates_and_swaps_axes():
    k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(tie_rot180(k)[0, 0], [[9, 8, 7], [6, 5, 4], [3, 2, 1]])
    k = np.random.default_rng(0).standard_normal((5, 1, 3, 3))
    k2 = tie_rot180(k)
    assert k2.shape == (1, 5, 3, 3)
    assert k2[0, 3, 0, 2] == k[3, 0, 2, 0]


def test_tie_rot180_symmetric_kernel_and_involution():
    lap = np.array([[0.0, 1, 0], [1, -4, 1], [0, 1, 0]]).reshape(1, 1, 3, 3)
    np.testing.assert_array_equal(tie_rot180(lap), lap)
    k = np.random.default_rng(1).standard_normal((4, 1, 3, 3))
    np.testing.assert_array_equal(tie_rot180(tie_rot180(k)), k)


def test_tie_rot180_rejects_bad_shape():
    with pytest.raises(InvalidInputError):
        tie_rot180(np.zeros((4, 1, 5, 5)))


# --- batch norm ---

def test_batch_norm_constant_channel_is_zero():
    x = np.full((2, 1, 4, 4), 3.0)
    out, _, _ = batch_norm_forward(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), mode="train")
    assert np.max(np.abs(out)) <= 1e-6


def test_batch_norm_zero_scale_gives_shift(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    out, _, _ = batch_norm_forward(x, np.zeros(2), np.array([0.5, -1.0]), np.zeros(2), np.ones(2))
    np.testing.assert_array_equal(out[:, 0], 0.5)
    np.testing.assert_array_equal(out[:, 1], -1.0)


def test_batch_norm_matches_two_pass_oracle(rng):
    x = rng.standard_normal((4, 2, 6, 6))
    scale = np.array([1.5, 0.5])
    shift = np.array([0.1, -0.2])
    out, (rm, rv), _ = batch_norm_forward(x, scale, shift, np.zeros(2), np.ones(2), mode="train")
    for c in range(2):
        values = x[:, c].ravel()
        mean = sum(values) / values.size
        var = sum((v - mean) ** 2 for v in values) / values.size
        expected = scale[c] * (x[:, c] - mean) / np.sqrt(var + BN_EPS) + shift[c]
        np.testing.assert_allclose(out[:, c], expected, rtol=1e-10, atol=1e-10)
        assert rm[c] == pytest.approx(0.1 * mean)
        assert rv[c] == pytest.approx(0.9 + 0.1 * var * values.size / (values.size - 1))


def test_batch_norm_eval_uses_running_stats(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    out, running, _ = batch_norm_forward(x, np.ones(1), np.zeros(1), np.array([1.0]), np.array([4.0]),
                                         mode="eval")
    np.testing.assert_allclose(out, (x - 1.0) / np.sqrt(4.0 + BN_EPS))
    assert running[0][0] == 1.0 and running[1][0] == 4.0


def test_batch_norm_rejects_single_value_in_train():
    with pytest.raises(InvalidInputError):
        batch_norm_forward(np.ones((1, 1, 1, 1)), np.ones(1), np.zeros(1), np.zeros(1), np.ones(1))


def test_batch_norm_eval_backward_scales_gradient():
    x = np.ones((1, 1, 2, 2))
    _, _, cache = batch_norm_forward(x, np.array([2.0]), np.zeros(1), np.zeros(1), np.array([3.0]), mode="eval")
    dx, dscale, dshift = batch_norm_backward(np.ones_like(x), cache)
    np.testing.assert_allclose(dx, 2.0 / np.sqrt(3.0 + BN_EPS))
    assert dshift[0] == 4.0


# --- prelu / sigmoid ---

def test_prelu_values():
    out, _ = prelu_forward(np.array([3.0, -2.0]).reshape(1, 1, 1, 2), np.array([0.25]))
    np.testing.assert_array_equal(out.ravel(), [3.0, -0.5])


def test_sigmoid_values_and_saturation():
    out = sigmoid(np.array([0.0, 40.0, -40.0, 1e4, -1e4]).reshape(1, 1, 1, 5))
    assert out.ravel()[0] == 0.5
    assert np.all(np.isfinite(out))
    assert np.all((out > 0) & (out < 1))


# --- tape ---

def test_grad_tape_replays_in_reverse_once():
    tape = GradTape()
    seen = []

    def make(tag, factor):
        def backward(grad, cache):
            seen.append(tag)
            return grad * factor, {"w": np.array([cache["v"]])}
        return backward

    tape.record("first", make("first", 2.0), {"v": 1.0})
    tape.record("second", make("second", 3.0), {"v": 5.0})
    grad, side = tape.backward(np.array([1.0]))
    assert seen == ["second", "first"]
    assert grad[0] == 6.0
    assert side["w"][0] == 6.0
    assert tape.op_ids == ["first", "second"]


def test_merge_grads_sums_by_key():
    merged = merge_grads({"a": np.ones(2)}, {"a": np.ones(2), "b": np.zeros(1)})
    np.testing.assert_array_equal(merged["a"], [2.0, 2.0])
    assert set(merged) == {"a", "b"}


# --- check_gradients ---

def test_check_gradients_conv2d_small():
    w = np.random.default_rng(3).standard_normal((1, 1, 3, 3))

    def loss(v):
        return float(np.sum(w * conv2d(v["x"], v["k"])))

    def grads(v):
        _, cache = conv2d_forward(v["x"], v["k"])
        dx, dk = conv2d_backward(w, cache)
        return {"x": dx, "k": dk}

    case = GradCheckCase("conv2d", {"x": (1, 1, 5, 5), "k": (1, 1, 3, 3)}, loss, grads)
    report = check_gradients(case, tolerance=1e-5)
    assert report.passed
    assert report.checked_entries == 25 + 9


def test_check_gradients_flags_wrong_gradient():
    case = GradCheckCase("square", {"x": (4,)}, lambda v: float(np.sum(v["x"] ** 2)),
                         lambda v: {"x": v["x"]})
    report = check_gradients(case)
    assert not report.passed
    assert report.max_rel_error > 0.1


def test_check_gradients_reports_non_finite_location():
    def grads(v):
        g = 2 * v["x"]
        g[1] = np.nan
        return {"x": g}

    case = GradCheckCase("nan", {"x": (3,)}, lambda v: float(np.sum(v["x"] ** 2)), grads)
    report = check_gradients(case)
    assert not report.passed
    assert "(1,)" in report.failure


def test_check_gradients_samples_entries():
    case = GradCheckCase("square", {"x": (50,)}, lambda v: float(np.sum(v["x"] ** 2)),
                         lambda v: {"x": 2 * v["x"]})
    report = check_gradients(case, max_entries=10)
    assert report.passed
    assert report.checked_entries == 10
