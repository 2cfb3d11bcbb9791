"""Tests for the tape-based tensor library.

Forward values are checked against closed forms or brute-force loops;
every differentiable operation is checked against central finite
differences at h=1e-5.
"""

import math

import numpy as np
import pytest

from fuseclip import autodiff as ad
from fuseclip.autodiff import Tensor
from fuseclip.errors import ContractError
from fuseclip.gradcheck import check_gradients, max_relative_error, numeric_gradient

RNG = np.random.default_rng


class TestElementwiseForward:
    def test_add_broadcasts_rows(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        b = Tensor(np.array([10.0, 20.0, 30.0]))
        out = (a + b).data
        np.testing.assert_array_equal(out, a.data + b.data)

    def test_scalar_operand_coerced(self):
        a = Tensor(np.array([1.0, 2.0]))
        np.testing.assert_array_equal((2.0 * a).data, [2.0, 4.0])
        np.testing.assert_array_equal((a - 1.0).data, [0.0, 1.0])
        np.testing.assert_array_equal((1.0 - a).data, [0.0, -1.0])

    def test_gelu_fixed_points(self):
        # gelu(0) = 0 and gelu is asymptotically the identity for large x.
        x = Tensor(np.array([0.0, 10.0, -10.0]))
        out = ad.gelu(x).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(10.0, abs=1e-12)
        assert out[2] == pytest.approx(0.0, abs=1e-12)

    def test_gelu_half_point(self):
        # gelu(x) = x/2 exactly when the Gaussian CDF equals 1/2 scaled:
        # at x=0 trivially; check a tabulated midpoint value instead.
        val = ad.gelu(Tensor(np.array(1.0))).item()
        expected = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
        assert val == pytest.approx(expected, abs=1e-15)


class TestMatmul:
    def test_matches_triple_loop(self):
        rng = RNG(0)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        expected = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    expected[i, j] += a[i, k] * b[k, j]
        assert np.max(np.abs(out - expected)) < 1e-12

    def test_batched_matches_per_slice(self):
        rng = RNG(1)
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 5, 2))
        out = ad.matmul(Tensor(a), Tensor(b)).data
        for s in range(3):
            np.testing.assert_allclose(out[s], a[s] @ b[s], atol=1e-12)

    def test_rank_one_rejected(self):
        with pytest.raises(ContractError):
            ad.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))

    def test_inner_mismatch_rejected(self):
        with pytest.raises(ContractError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


class TestSoftmax:
    def test_rows_on_simplex(self):
        rng = RNG(2)
        x = Tensor(rng.standard_normal((5, 7)))
        s = ad.softmax(x).data
        assert np.all(s > 0.0)
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), atol=1e-12)

    def test_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        s1 = ad.softmax(Tensor(x)).data
        s2 = ad.softmax(Tensor(x + 1000.0)).data
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    def test_extreme_logits_stay_finite(self):
        x = Tensor(np.array([[1e6, 0.0, -1e6]]))
        s = ad.softmax(x).data
        assert np.all(np.isfinite(s))
        assert s[0, 0] == pytest.approx(1.0)

    def test_known_two_way(self):
        # softmax([z, 0]) = [sigmoid(z), 1 - sigmoid(z)].
        z = 0.7
        s = ad.softmax(Tensor(np.array([[z, 0.0]]))).data[0]
        sig = 1.0 / (1.0 + math.exp(-z))
        assert s[0] == pytest.approx(sig, abs=1e-15)
        assert s[1] == pytest.approx(1.0 - sig, abs=1e-15)


class TestLogsumexp:
    def test_matches_naive_small_values(self):
        rng = RNG(3)
        x = rng.standard_normal((4, 6))
        out = ad.logsumexp(Tensor(x)).data
        np.testing.assert_allclose(out, np.log(np.exp(x).sum(axis=-1)), atol=1e-12)

    def test_large_values_no_overflow(self):
        x = np.array([[1000.0, 1000.0]])
        out = ad.logsumexp(Tensor(x)).data
        assert out[0] == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)


class TestLayerNorm:
    def test_rows_standardized(self):
        rng = RNG(4)
        x = Tensor(rng.standard_normal((6, 16)) * 3.0 + 2.0)
        gain = Tensor(np.ones(16))
        bias = Tensor(np.zeros(16))
        out = ad.layer_norm(x, gain, bias).data
        np.testing.assert_allclose(out.mean(axis=-1), np.zeros(6), atol=1e-12)
        # With epsilon 1e-5 inside the root the variance lands just below 1.
        np.testing.assert_allclose(out.var(axis=-1), np.ones(6), atol=2e-5)

    def test_affine_applied_after_normalization(self):
        x = Tensor(np.array([[1.0, 3.0]]))
        gain = Tensor(np.array([2.0, 2.0]))
        bias = Tensor(np.array([5.0, 5.0]))
        out = ad.layer_norm(x, gain, bias).data[0]
        # Normalized pair is (-1, +1) up to the epsilon shrink.
        assert out[0] == pytest.approx(3.0, abs=1e-4)
        assert out[1] == pytest.approx(7.0, abs=1e-4)

    def test_width_one_rejected(self):
        with pytest.raises(ContractError):
            ad.layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


class TestAttention:
    def test_single_key_copies_value(self):
        # One key: softmax weight is exactly 1, output equals the value row.
        q = Tensor(RNG(5).standard_normal((1, 3, 4)))
        k = Tensor(RNG(6).standard_normal((1, 1, 4)))
        v = Tensor(RNG(7).standard_normal((1, 1, 4)))
        out = ad.scaled_dot_attention(q, k, v).data
        for row in range(3):
            np.testing.assert_allclose(out[0, row], v.data[0, 0], atol=1e-12)

    def test_identical_keys_average_values(self):
        # Equal scores give uniform weights, so the output is the value mean.
        q = Tensor(np.ones((1, 2, 4)))
        k = Tensor(np.zeros((1, 3, 4)))
        v = Tensor(RNG(8).standard_normal((1, 3, 4)))
        out = ad.scaled_dot_attention(q, k, v).data
        np.testing.assert_allclose(
            out[0, 0], v.data[0].mean(axis=0), atol=1e-12
        )

    def test_matches_loop_reference(self):
        rng = RNG(9)
        q, k, v = (rng.standard_normal((2, 3, 4)) for _ in range(3))
        out = ad.scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v)).data
        for b in range(2):
            scores = np.zeros((3, 3))
            for i in range(3):
                for j in range(3):
                    scores[i, j] = q[b, i] @ k[b, j] / math.sqrt(4)
            w = np.exp(scores - scores.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            np.testing.assert_allclose(out[b], w @ v[b], atol=1e-12)

    def test_key_mask_removes_key(self):
        rng = RNG(10)
        q = Tensor(rng.standard_normal((1, 2, 4)))
        k_full = rng.standard_normal((1, 3, 4))
        v_full = rng.standard_normal((1, 3, 4))
        mask = np.array([[1.0, 1.0, 0.0]])
        masked = ad.scaled_dot_attention(
            Tensor(q.data), Tensor(k_full), Tensor(v_full), key_mask=mask
        ).data
        trimmed = ad.scaled_dot_attention(
            Tensor(q.data), Tensor(k_full[:, :2]), Tensor(v_full[:, :2])
        ).data
        np.testing.assert_allclose(masked, trimmed, atol=1e-9)

    def test_query_mask_zeroes_rows(self):
        rng = RNG(11)
        q = Tensor(rng.standard_normal((1, 3, 4)))
        k = Tensor(rng.standard_normal((1, 2, 4)))
        v = Tensor(rng.standard_normal((1, 2, 4)))
        out = ad.scaled_dot_attention(
            q, k, v, query_mask=np.array([[1.0, 0.0, 1.0]])
        ).data
        assert np.all(out[0, 1] == 0.0)
        assert np.any(out[0, 0] != 0.0)

    def test_empty_sequence_rejected(self):
        q = Tensor(np.ones((1, 0, 4)))
        kv = Tensor(np.ones((1, 2, 4)))
        with pytest.raises(ContractError):
            ad.scaled_dot_attention(q, kv, kv)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor(RNG(12).standard_normal((3, 4)), requires_grad=True)
        ad.tsum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_via_product_doubles(self):
        # y = sum(x * x) must accumulate both product branches: dy/dx = 2x.
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        ad.tsum(x * x).backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-15)

    def test_reused_tensor_accumulates(self):
        x = Tensor(np.array(3.0), requires_grad=True)
        y = x * 2.0 + x * 5.0
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_broadcast_bias_gradient_sums_batch(self):
        x = Tensor(np.ones((4, 3)))
        b = Tensor(np.zeros(3), requires_grad=True)
        ad.tsum(x + b).backward()
        np.testing.assert_array_equal(b.grad, np.full(3, 4.0))

    def test_nonscalar_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_untracked_loss_rejected(self):
        with pytest.raises(ContractError):
            ad.tsum(Tensor(np.ones(3))).backward()

    def test_detach_blocks_gradient(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        y = x * x.detach()
        y.backward()
        assert x.grad == pytest.approx(2.0)


def _fd_case(name, build):
    return pytest.param(build, id=name)


@pytest.mark.parametrize(
    "build",
    [
        _fd_case("add", lambda t: ad.tsum(ad.tanh(t[0] + t[1]))),
        _fd_case("sub", lambda t: ad.tsum(ad.tanh(t[0] - t[1]))),
        _fd_case("mul", lambda t: ad.tsum(ad.tanh(t[0] * t[1]))),
        _fd_case("div", lambda t: ad.tsum(t[0] / (t[1] * t[1] + 2.0))),
        _fd_case("neg", lambda t: ad.tsum(ad.exp(-t[0]))),
        _fd_case("pow", lambda t: ad.tsum((t[0] * t[0] + 1.0) ** 1.5)),
        _fd_case("exp", lambda t: ad.tsum(ad.exp(t[0]))),
        _fd_case("log", lambda t: ad.tsum(ad.log(t[0] * t[0] + 1.5))),
        _fd_case("sqrt", lambda t: ad.tsum(ad.sqrt(t[0] * t[0] + 1.0))),
        _fd_case("tanh", lambda t: ad.tsum(ad.tanh(t[0]))),
        _fd_case("gelu", lambda t: ad.tsum(ad.gelu(t[0]))),
        _fd_case("matmul", lambda t: ad.tsum(ad.tanh(ad.matmul(t[0], t[1]) @ t[2]))),
        _fd_case("swap_last", lambda t: ad.tsum(ad.swap_last(t[0]) @ t[0])),
        _fd_case(
            "transpose",
            lambda t: ad.tsum(ad.tanh(ad.transpose(ad.reshape(t[0], (3, 3, 1)), (2, 0, 1)) @ t[1])),
        ),
        _fd_case("reshape", lambda t: ad.tsum(ad.reshape(t[0], (9,)) ** 2.0)),
        _fd_case("sum_axis", lambda t: ad.tsum(ad.tanh(ad.tsum(t[0], axis=0)))),
        _fd_case("sum_keepdims", lambda t: ad.tsum(t[0] * ad.tsum(t[0], axis=1, keepdims=True))),
        _fd_case("mean", lambda t: ad.tsum(ad.tanh(ad.tmean(t[0], axis=1)))),
        _fd_case("softmax", lambda t: ad.tsum(t[1] * ad.softmax(t[0]))),
        _fd_case("diagonal", lambda t: ad.tsum(ad.exp(ad.diagonal(t[0])))),
        _fd_case(
            "take_rows",
            lambda t: ad.tsum(ad.tanh(ad.take_rows(t[0], [2, 0, 2]) @ t[1])),
        ),
        _fd_case("logsumexp", lambda t: ad.tsum(ad.logsumexp(t[0]))),
        _fd_case("layer_norm", lambda t: ad.tsum(t[1] * ad.layer_norm(t[0], t[3], t[4]))),
        _fd_case("l2_normalize", lambda t: ad.tsum(t[1] * ad.l2_normalize_rows(t[0]))),
        _fd_case(
            "attention",
            lambda t: ad.tsum(ad.tanh(ad.scaled_dot_attention(t[0], t[1], t[2]))),
        ),
    ],
)
def test_gradients_match_finite_differences(build):
    rng = RNG(20)
    square = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    mate = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    third = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
    gain = Tensor(1.0 + 0.1 * rng.standard_normal(3), requires_grad=True)
    bias = Tensor(0.1 * rng.standard_normal(3), requires_grad=True)
    params = (square, mate, third, gain, bias)
    err = check_gradients(lambda: build(params), params)
    assert err < 1e-6


def test_masked_attention_gradients_match_finite_differences():
    rng = RNG(21)
    q = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    v = Tensor(rng.standard_normal((2, 4, 4)), requires_grad=True)
    key_mask = np.array([[1.0, 1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 1.0]])
    query_mask = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 1.0]])

    def loss():
        out = ad.scaled_dot_attention(q, k, v, key_mask=key_mask, query_mask=query_mask)
        return ad.tsum(ad.tanh(out))

    assert check_gradients(loss, (q, k, v)) < 1e-6


def test_batched_matmul_gradients_match_finite_differences():
    rng = RNG(22)
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 5)), requires_grad=True)

    def loss():
        return ad.tsum(ad.tanh(ad.matmul(a, b)))

    assert check_gradients(loss, (a, b)) < 1e-6


def test_subsampled_check_agrees_with_full(seed=23):
    rng = RNG(seed)
    x = Tensor(rng.standard_normal((6, 6)), requires_grad=True)

    def loss():
        return ad.tsum(ad.tanh(x @ x))

    full = check_gradients(loss, (x,))
    sub = check_gradients(
        loss, (x,), coords_per_param=10, rng=np.random.default_rng(0)
    )
    assert full < 1e-6
    assert sub <= full + 1e-12


def test_numeric_gradient_quadratic_exact():
    # d/dx sum(x^2) = 2x; central differences are exact for quadratics.
    x = Tensor(np.array([1.0, -0.5, 2.0]))
    grad = numeric_gradient(lambda: ad.tsum(x * x), x)
    np.testing.assert_allclose(grad, 2.0 * x.data, atol=1e-9)


def test_max_relative_error_scales_large_values():
    a = np.array([1000.0])
    b = np.array([1000.001])
    assert max_relative_error(a, b) == pytest.approx(1e-6, rel=1e-3)


class TestSinusoidalPositions:
    def test_shape_and_range(self):
        table = ad.sinusoidal_positions(7, 8)
        assert table.shape == (7, 8)
        assert np.max(np.abs(table)) <= 1.0

    def test_first_row_alternates_zero_one(self):
        table = ad.sinusoidal_positions(4, 6)
        np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    def test_known_entry(self):
        # Position 3, channel 0 uses frequency 1: sin(3).
        table = ad.sinusoidal_positions(5, 4)
        assert table[3, 0] == pytest.approx(math.sin(3.0), abs=1e-12)
