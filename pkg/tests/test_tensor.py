import io
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sesame import tensor as T
from sesame.errors import ConfigurationError, DimensionError, EvaluationError, FormatError, InputError
from sesame.tensor import Tensor, grad_check, grad_check_detailed, gradients, parameter

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def numeric_grad(f, x, h=1e-6):
    """Plain central differences on a numpy function, the oracle for tape gradients."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class TestTensor:
    def test_data_is_read_only_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2) and t.size == 4
        with pytest.raises(ValueError):
            t.data[0, 0] = 5.0

    def test_source_array_is_copied(self):
        src = np.ones(3)
        t = Tensor(src)
        src[0] = 7.0
        assert t.data[0] == 1.0

    def test_operators(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_array_equal((a + b).data, [4, 7])
        np.testing.assert_array_equal((a - b).data, [-2, -3])
        np.testing.assert_array_equal((a * b).data, [3, 10])
        np.testing.assert_array_equal((b / a).data, [3, 2.5])
        np.testing.assert_array_equal((-a).data, [-1, -2])
        np.testing.assert_array_equal((2.0 * a).data, [2, 4])

    def test_constants_do_not_build_a_graph(self):
        out = T.mul(Tensor([1.0]), Tensor([2.0]))
        assert not out.requires_grad and out._parents == ()


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)

    def test_hand_computed(self):
        out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
        np.testing.assert_array_equal(out.data, [[2], [4]])

    def test_zero_annihilates(self, rng):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(rng.normal(size=(3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_left_operand_matches_loop(self, rng):
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        out = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(3):
            np.testing.assert_allclose(out[i], a[i] @ b, rtol=1e-14)

    def test_gradients_match_differences(self, rng):
        a0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))
        a, b = parameter(a0), parameter(b0)
        g = gradients(T.sum(T.matmul(a, b)), {"a": a, "b": b})
        np.testing.assert_allclose(g["a"], numeric_grad(lambda x: (x @ b0).sum(), a0), atol=1e-8)
        np.testing.assert_allclose(g["b"], numeric_grad(lambda x: (a0 @ x).sum(), b0), atol=1e-8)


class TestSoftmax:
    def test_equal_logits(self):
        np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], rtol=0, atol=1e-15)

    def test_exact_exponentials(self):
        out = T.softmax_rows(Tensor([[math.log(2), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=1e-15)

    def test_large_logit_matches_arbitrary_precision(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data[0]
        with mpmath.workdps(50):
            big = mpmath.exp(1000)
            expected = [big / (big + 1), 1 / (big + 1)]
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(float(expected[0]), rel=1e-15)
        assert out[1] == pytest.approx(float(expected[1]), rel=1e-12, abs=0)

    @given(arrays(np.float64, (3, 5), elements=st.floats(-700, 700)))
    def test_rows_sum_to_one(self, x):
        out = T.softmax_rows(Tensor(x)).data
        assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)
        assert np.all(out >= 0)

    def test_sum_of_softmax_has_zero_gradient(self, rng):
        x = rng.normal(size=(3, 4))
        assert grad_check(lambda p: T.sum(T.softmax_rows(p["x"])), {"x": x}) < 1e-8
        xt = parameter(x)
        np.testing.assert_allclose(gradients(T.sum(T.softmax_rows(xt)), {"x": xt})["x"], 0.0, atol=1e-15)


class TestConv1dSame:
    def test_single_tap_is_identity(self, rng):
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(T.conv1d_same(Tensor(x), [1.0]).data, x)

    def test_centred_impulse(self):
        out = T.conv1d_same(Tensor([[0.0], [1.0], [0.0]]), [0.5, 1.0, 0.5]).data
        np.testing.assert_array_equal(out[:, 0], [0.5, 1.0, 0.5])

    def test_zero_padding_at_left_edge(self):
        out = T.conv1d_same(Tensor([[1.0], [0.0], [0.0]]), [0.5, 1.0, 0.5]).data
        np.testing.assert_array_equal(out[:, 0], [1.0, 0.5, 0.0])

    def test_orientation_is_cross_correlation(self):
        # asymmetric taps show which neighbour each tap reads
        out = T.conv1d_same(Tensor([[0.0], [1.0], [0.0]]), [1.0, 0.0, 0.0]).data
        np.testing.assert_array_equal(out[:, 0], [0.0, 0.0, 1.0])

    def test_matches_numpy_convolve(self, rng):
        x = rng.normal(size=(7, 2))
        taps = np.array([0.2, 0.7, 1.0, 0.7, 0.2])
        out = T.conv1d_same(Tensor(x), taps).data
        for j in range(2):
            np.testing.assert_allclose(out[:, j], np.convolve(x[:, j], taps[::-1], mode="same"), rtol=1e-14)

    @pytest.mark.parametrize("taps", [[1.0, 1.0], [1.0, 2.0, 3.0, 4.0]])
    def test_even_kernel_rejected(self, taps):
        with pytest.raises(ConfigurationError):
            T.conv1d_same(Tensor(np.ones((6, 2))), taps)

    def test_kernel_longer_than_sequence_rejected(self):
        with pytest.raises(ConfigurationError):
            T.conv1d_same(Tensor(np.ones((2, 2))), [0.5, 1.0, 0.5])

    @given(
        arrays(np.float64, (6, 2), elements=finite),
        arrays(np.float64, (6, 2), elements=finite),
        finite,
        finite,
    )
    def test_linear(self, a, b, alpha, beta):
        taps = [0.3, 1.0, 0.3]
        lhs = T.conv1d_same(Tensor(alpha * a + beta * b), taps).data
        rhs = alpha * T.conv1d_same(Tensor(a), taps).data + beta * T.conv1d_same(Tensor(b), taps).data
        assert np.max(np.abs(lhs - rhs)) < 1e-12 * max(1.0, np.max(np.abs(lhs)))

    def test_along_other_axis(self, rng):
        x = rng.normal(size=(3, 6))
        taps = [0.5, 1.0, 0.5]
        np.testing.assert_allclose(
            T.conv1d_same(Tensor(x), taps, axis=-1).data,
            T.conv1d_same(Tensor(x.T), taps, axis=-2).data.T,
        )

    def test_gradient(self, rng):
        x = rng.normal(0, 0.1, size=(6, 3))
        r = rng.normal(size=(6, 3))
        taps = [0.2, 1.0, 0.6]
        assert grad_check(lambda p: T.sum(T.mul(T.conv1d_same(p["x"], taps), Tensor(r))), {"x": x}) < 1e-8


class TestElementwise:
    def test_sigmoid_values(self):
        assert T.elementwise("sigmoid", Tensor(0.0)).item() == 0.5
        assert T.elementwise("sigmoid", Tensor(math.log(3))).item() == pytest.approx(0.75, rel=1e-15)

    def test_sigmoid_saturates_without_overflow(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0])).data
        np.testing.assert_array_equal(out, [0.0, 1.0])

    def test_relu(self):
        np.testing.assert_array_equal(T.elementwise("relu", Tensor([-3.0, 3.0])).data, [0.0, 3.0])

    def test_scale_and_add(self):
        assert T.elementwise("scale", Tensor([2.0]), 1.5).data[0] == 3.0
        np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor(1.0)).data, [2.0, 3.0])

    def test_unknown_name(self):
        with pytest.raises(ConfigurationError):
            T.elementwise("tanh", Tensor(1.0))

    def test_no_implicit_broadcasting(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))

    def test_explicit_broadcast_gradient_sums(self):
        b = parameter(np.array([1.0, 2.0, 3.0]))
        out = T.sum(T.broadcast_to(b, (4, 3)))
        np.testing.assert_array_equal(gradients(out, {"b": b})["b"], [4.0, 4.0, 4.0])

    @pytest.mark.parametrize("op", ["mul", "div", "sub", "add"])
    def test_binary_gradients(self, op, rng):
        a, b = rng.normal(0, 0.1, (3, 2)), rng.uniform(0.5, 1.5, (3, 2))
        assert grad_check(lambda p: T.sum(T.elementwise(op, p["a"], p["b"])), {"a": a, "b": b}) < 1e-8

    def test_scalar_operand_gradient(self, rng):
        a = rng.normal(size=(3, 2))
        assert grad_check(lambda p: T.sum(T.mul(p["a"], p["c"])), {"a": a, "c": np.array(0.7)}) < 1e-8


class TestGradients:
    def test_shared_subexpression_accumulates(self):
        x = parameter(np.array([2.0]))
        y = T.mul(x, x)
        loss = T.sum(T.add(y, y))
        assert gradients(loss, {"x": x})["x"][0] == pytest.approx(8.0)

    def test_unused_parameter_gets_zeros(self):
        x, unused = parameter(np.ones(2)), parameter(np.ones((3, 3)))
        g = gradients(T.sum(x), {"x": x, "u": unused})
        np.testing.assert_array_equal(g["u"], np.zeros((3, 3)))

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(DimensionError):
            gradients(parameter(np.ones(2)))

    def test_replay_is_bit_identical(self, rng):
        x0 = rng.normal(size=(4, 4))

        def run():
            x = parameter(x0)
            loss = T.sum(T.softmax_rows(T.matmul(x, T.transpose(x))))
            return gradients(loss, {"x": x})["x"]

        assert run().tobytes() == run().tobytes()

    def test_deep_chain_does_not_recurse(self):
        x = parameter(np.array(1.0))
        y = x
        for _ in range(5000):
            y = T.scale(y, 1.0)
        assert gradients(y, {"x": x})["x"] == 1.0

    def test_fancy_indexing_accumulates(self):
        x = parameter(np.arange(3.0))
        out = T.sum(x[np.array([0, 0, 2])])
        np.testing.assert_array_equal(gradients(out, {"x": x})["x"], [2.0, 0.0, 1.0])


class TestNetworkOps:
    def test_layer_norm_statistics(self, rng):
        x = rng.normal(3.0, 5.0, size=(4, 8))
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-8)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-8)

    def test_layer_norm_gradient(self, rng):
        params = {"x": rng.normal(size=(3, 5)), "g": rng.normal(size=5), "b": rng.normal(size=5)}
        r = rng.normal(size=(3, 5))
        f = lambda p: T.sum(T.mul(T.layer_norm(p["x"], p["g"], p["b"]), Tensor(r)))  # noqa: E731
        assert grad_check(f, params) < 1e-6

    def test_embedding_error_names_position(self):
        with pytest.raises(InputError, match=r"position \(1, 2\)"):
            T.embedding(Tensor(np.zeros((5, 2))), np.array([[0, 1, 2], [3, 4, 5]]))

    def test_embedding_gradient_scatters(self):
        table = parameter(np.zeros((4, 2)))
        out = T.sum(T.embedding(table, np.array([1, 1, 3])))
        np.testing.assert_array_equal(gradients(out, {"t": table})["t"], [[0, 0], [2, 2], [0, 0], [1, 1]])

    def test_cross_entropy_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((3, 4))), np.array([0, 1, 2])).item()
        assert loss == pytest.approx(math.log(4), rel=1e-15)

    def test_cross_entropy_gradient(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        assert grad_check(lambda p: T.cross_entropy(p["z"], labels), {"z": logits}) < 1e-8

    def test_stack_concat_round_trip(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.stack([Tensor(a), Tensor(b)], axis=-1).data[..., 1], b)
        np.testing.assert_array_equal(T.concat([Tensor(a), Tensor(b)], axis=-1).data[:, 3:], b)

    def test_stack_and_concat_gradients(self, rng):
        params = {"a": rng.normal(size=(2, 3)), "b": rng.normal(size=(2, 3))}
        r1, r2 = rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 6))

        def f(p):
            s = T.sum(T.mul(T.stack([p["a"], p["b"]], axis=-1), Tensor(r1)))
            c = T.sum(T.mul(T.concat([p["a"], p["b"]], axis=-1), Tensor(r2)))
            return T.add(s, c)

        assert grad_check(f, params) < 1e-8


class TestGradCheck:
    def test_quadratic(self):
        errors = grad_check_detailed(lambda p: T.sum(T.mul(p["t"], p["t"])), {"t": np.array([3.0])})
        assert errors["t"] < 1e-8

    def test_detects_wrong_gradient(self):
        err = grad_check(lambda p: T.sum(T.mul(p["t"], p["t"])), {"t": np.array([3.0])}, analytic={"t": np.array([5.0])})
        assert err == pytest.approx(1 / 6, abs=1e-6)

    def test_relative_error_uses_unit_floor(self):
        # numeric derivative 600 > 1, so the error is relative
        err = grad_check(lambda p: T.sum(T.scale(p["t"], 600.0)), {"t": np.array([1.0])}, analytic={"t": np.array([606.0])})
        assert err == pytest.approx(0.01, rel=1e-6)

    def test_non_finite_objective_names_parameter(self):
        def f(p):
            # sqrt is finite at the base point but not at w[1] - h
            with np.errstate(invalid="ignore"):
                return Tensor(np.sqrt(p["w"].data).sum())

        with pytest.raises(EvaluationError, match=r"w\[1\]"):
            grad_check(f, {"w": np.array([1.0, 0.0])}, h=1e-5)

    def test_step_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            grad_check(lambda p: T.sum(p["x"]), {"x": np.ones(1)}, h=0.0)

    @settings(max_examples=20, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-0.3, 0.3)))
    def test_random_small_inputs_pass(self, x):
        r = np.linspace(-1, 1, 12).reshape(3, 4)

        def f(p):
            y = T.sigmoid(T.matmul(p["x"], T.transpose(p["x"])))
            return T.add(T.sum(T.softmax_rows(y)), T.sum(T.mul(T.conv1d_same(p["x"], [0.5, 1.0, 0.5], axis=-1), Tensor(r))))

        assert grad_check(f, {"x": x}) < 1e-4


class TestSerialization:
    def test_round_trip(self, rng):
        x = rng.normal(size=(2, 3, 4))
        buf = io.BytesIO()
        T.write_tensor(buf, x)
        buf.seek(0)
        np.testing.assert_array_equal(T.read_tensor(buf), x)

    def test_header_layout(self):
        raw = T.tensors_to_bytes([np.array([[1.0, 2.0]])])
        assert raw[:12] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(raw[12:], dtype="<f8").tolist() == [1.0, 2.0]

    def test_scalar(self):
        buf = io.BytesIO(T.tensors_to_bytes([np.array(2.5)]))
        assert T.read_tensor(buf).shape == ()

    def test_truncated(self):
        raw = T.tensors_to_bytes([np.ones(4)])
        with pytest.raises(FormatError):
            T.read_tensor(io.BytesIO(raw[:-3]))

    def test_seeded_tensors_identical(self):
        a = Tensor(np.random.default_rng(5).normal(size=(3, 3)))
        b = Tensor(np.random.default_rng(5).normal(size=(3, 3)))
        assert T.tensors_to_bytes([a]) == T.tensors_to_bytes([b])
