"""Forward semantics and tape behavior of the autodiff engine."""

import numpy as np
import pytest

import oracles
from partsel import tensor as T


# ---------------------------------------------------------------------------
# construction and dtype rules


def test_default_dtype_is_float32():
    assert T.Tensor([1.0, 2.0]).dtype == np.float32


def test_set_default_dtype_switches_new_tensors():
    T.set_default_dtype("float64")
    assert T.Tensor([1.0]).dtype == np.float64
    T.set_default_dtype("float32")
    assert T.Tensor([1.0]).dtype == np.float32


def test_set_default_dtype_rejects_unknown():
    with pytest.raises(T.DtypeError):
        T.set_default_dtype("float16")


def test_explicit_dtype_overrides_default():
    assert T.Tensor([1.0], dtype="float64").dtype == np.float64


def test_mixed_dtype_operands_raise():
    a = T.Tensor([1.0], dtype="float32")
    b = T.Tensor([1.0], dtype="float64")
    with pytest.raises(T.DtypeError):
        T.add(a, b)


def test_shape_mismatch_raises():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))))


def test_scalar_broadcast_both_sides():
    a = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    s = T.Tensor(10.0)
    np.testing.assert_array_equal(T.add(a, s).data, a.data + 10.0)
    np.testing.assert_array_equal(T.add(s, a).data, a.data + 10.0)
    np.testing.assert_array_equal(T.mul(a, 2.0).data, a.data * 2.0)


def test_python_scalar_operand_promotes_to_tensor():
    a = T.Tensor([1.0, 2.0])
    out = a + 1.0
    np.testing.assert_array_equal(out.data, [2.0, 3.0])
    out = 2.0 * a
    np.testing.assert_array_equal(out.data, [2.0, 4.0])


# ---------------------------------------------------------------------------
# elementwise forward values


def test_add_sub_neg_mul_values():
    a = T.Tensor([1.0, -2.0, 3.0])
    b = T.Tensor([0.5, 4.0, -1.0])
    np.testing.assert_array_equal(T.add(a, b).data, [1.5, 2.0, 2.0])
    np.testing.assert_array_equal(T.sub(a, b).data, [0.5, -6.0, 4.0])
    np.testing.assert_array_equal(T.neg(a).data, [-1.0, 2.0, -3.0])
    np.testing.assert_array_equal(T.mul(a, b).data, [0.5, -8.0, -3.0])


def test_relu_abs_square():
    x = T.Tensor([-2.0, 0.0, 3.0])
    np.testing.assert_array_equal(T.relu(x).data, [0.0, 0.0, 3.0])
    np.testing.assert_array_equal(T.abs(x).data, [2.0, 0.0, 3.0])
    np.testing.assert_array_equal(T.square(x).data, [4.0, 0.0, 9.0])


def test_sigmoid_at_zero_is_exactly_half():
    assert T.sigmoid(T.Tensor(0.0)).item() == 0.5


def test_sigmoid_known_value(f64):
    # 1/(1+e^-1), evaluated directly
    want = 1.0 / (1.0 + np.exp(-1.0))
    assert abs(T.sigmoid(T.Tensor(1.0)).item() - want) < 1e-15


def test_sigmoid_saturation_is_finite_and_monotone(f64):
    x = T.Tensor([-1e3, -50.0, 0.0, 50.0, 1e3])
    s = T.sigmoid(x).data
    assert np.isfinite(s).all()
    assert (np.diff(s) >= 0).all()
    assert s[0] >= 0.0 and s[-1] <= 1.0
    assert s[0] < 1e-20 and s[-1] > 1.0 - 1e-15


def test_sigmoid_symmetry(f64):
    x = np.linspace(-30, 30, 601)
    s = T.sigmoid(T.Tensor(x)).data
    s_neg = T.sigmoid(T.Tensor(-x)).data
    np.testing.assert_allclose(s + s_neg, 1.0, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# reductions and shape ops


def test_sum_and_mean_axes(rng, f64):
    x = rng.normal(size=(2, 3, 4))
    t = T.Tensor(x)
    np.testing.assert_allclose(T.sum(t).item(), x.sum(), rtol=1e-15)
    np.testing.assert_allclose(T.sum(t, axis=1).data, x.sum(axis=1), rtol=1e-15)
    np.testing.assert_allclose(T.sum(t, axis=(0, 2), keepdims=True).data,
                               x.sum(axis=(0, 2), keepdims=True), rtol=1e-15)
    np.testing.assert_allclose(T.mean(t, axis=2).data, x.mean(axis=2), rtol=1e-15)


def test_concat_values_and_validation(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4, 3))
    out = T.concat([T.Tensor(a), T.Tensor(b)], axis=0)
    np.testing.assert_array_equal(out.data, np.concatenate([a, b]).astype(np.float32))
    with pytest.raises(T.ShapeError):
        T.concat([T.Tensor(a), T.Tensor(rng.normal(size=(4, 2)))], axis=0)
    with pytest.raises(T.ShapeError):
        T.concat([], axis=0)


def test_reshape_transpose_roundtrip(rng):
    x = rng.normal(size=(2, 3, 4))
    t = T.Tensor(x)
    np.testing.assert_array_equal(T.reshape(t, (6, 4)).data, x.reshape(6, 4).astype(np.float32))
    np.testing.assert_array_equal(T.transpose(t, (2, 0, 1)).data, x.transpose(2, 0, 1).astype(np.float32))


def test_narrow_values_and_bounds(rng):
    x = rng.normal(size=(3, 5)).astype(np.float32)
    t = T.Tensor(x)
    np.testing.assert_array_equal(T.narrow(t, 1, 1, 3).data, x[:, 1:4])
    with pytest.raises(T.ShapeError):
        T.narrow(t, 1, 4, 2)


def test_crop_nchw_matches_slicing(rng):
    x = rng.normal(size=(2, 3, 6, 7)).astype(np.float32)
    out = T.crop_nchw(T.Tensor(x), 1, 2, 5, 0, 4)
    np.testing.assert_array_equal(out.data, x[1:2, :, 2:5, 0:4])
    with pytest.raises(T.ShapeError):
        T.crop_nchw(T.Tensor(x), 2, 0, 1, 0, 1)  # sample index out of range


def test_gather_with_duplicates(rng):
    x = rng.normal(size=7).astype(np.float32)
    idx = np.array([3, 3, 0, 6])
    np.testing.assert_array_equal(T.gather(T.Tensor(x), idx).data, x[idx])
    with pytest.raises(T.ShapeError):
        T.gather(T.Tensor(x), np.array([7]))


# ---------------------------------------------------------------------------
# dense / conv / pool / resize forward oracles


def test_linear_identity_weight():
    x = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    w = T.Tensor(np.eye(2))
    b = T.Tensor([10.0, 20.0])
    np.testing.assert_array_equal(T.linear(x, w, b).data, [[11.0, 22.0], [13.0, 24.0]])


def test_linear_matches_triple_loop_reference(rng, f64):
    for _ in range(20):
        x = rng.normal(size=(4, 5))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=3)
        got = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        np.testing.assert_allclose(got, oracles.matmul_naive(x, w, b), rtol=1e-12)


def test_linear_shape_validation():
    with pytest.raises(T.ShapeError):
        T.linear(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 2))))
    with pytest.raises(T.ShapeError):
        T.linear(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((3, 2))), T.Tensor(np.zeros(3)))


def test_conv2d_identity_kernel_reproduces_input(rng):
    """A 3x3 kernel with only the center tap set copies the input through."""
    x = rng.normal(size=(2, 1, 5, 5)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = T.conv2d(T.Tensor(x), T.Tensor(w), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_zero_input_yields_bias():
    x = T.Tensor(np.zeros((1, 2, 4, 4)))
    w = T.Tensor(np.ones((3, 2, 3, 3)))
    b = T.Tensor([1.0, -2.0, 0.5])
    out = T.conv2d(x, w, b, stride=1, padding=1)
    for c, v in enumerate([1.0, -2.0, 0.5]):
        np.testing.assert_array_equal(out.data[0, c], np.full((4, 4), v, dtype=np.float32))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_matches_six_loop_reference(rng, f64, stride, padding):
    for _ in range(5):
        x = rng.normal(size=(2, 3, 6, 7))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding).data
        want = oracles.conv2d_naive(x, w, b, stride, padding)
        np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv2d_output_shape():
    x = T.Tensor(np.zeros((1, 1, 8, 8)))
    w = T.Tensor(np.zeros((5, 1, 3, 3)))
    assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 5, 4, 4)


def test_conv2d_validation():
    x = T.Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(T.ShapeError):
        T.conv2d(x, T.Tensor(np.zeros((1, 3, 3, 3))))  # channel mismatch
    with pytest.raises(T.ShapeError):
        T.conv2d(x, T.Tensor(np.zeros((1, 2, 5, 5))))  # kernel larger than input


def test_max_pool2d_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = T.max_pool2d(T.Tensor(x), 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], [[5.0, 7.0], [13.0, 15.0]])


def test_max_pool2d_matches_window_max(rng, f64):
    x = rng.normal(size=(2, 3, 6, 6))
    out = T.max_pool2d(T.Tensor(x), 2, 2).data
    for n in range(2):
        for c in range(3):
            for i in range(3):
                for j in range(3):
                    assert out[n, c, i, j] == x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()


def test_resize_bilinear_identity_when_same_size(rng):
    x = rng.normal(size=(1, 2, 5, 7)).astype(np.float32)
    out = T.resize_bilinear(T.Tensor(x), 5, 7)
    np.testing.assert_array_equal(out.data, x)


def test_resize_bilinear_2x2_to_3x3_hand_case(f64):
    x = T.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(1, 1, 2, 2))
    out = T.resize_bilinear(x, 3, 3).data[0, 0]
    want = np.array([[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    np.testing.assert_allclose(out, want, rtol=0, atol=1e-15)


def test_resize_bilinear_preserves_corners(rng, f64):
    x = rng.normal(size=(1, 1, 4, 6))
    out = T.resize_bilinear(T.Tensor(x), 9, 11).data
    assert out[0, 0, 0, 0] == pytest.approx(x[0, 0, 0, 0], abs=1e-15)
    assert out[0, 0, 0, -1] == pytest.approx(x[0, 0, 0, -1], abs=1e-15)
    assert out[0, 0, -1, 0] == pytest.approx(x[0, 0, -1, 0], abs=1e-15)
    assert out[0, 0, -1, -1] == pytest.approx(x[0, 0, -1, -1], abs=1e-15)


def test_resize_bilinear_matches_direct_formula(rng, f64):
    """Cross-check the vectorized op against the per-pixel interpolation."""
    for _ in range(10):
        h, w = rng.integers(2, 8, size=2)
        oh, ow = rng.integers(1, 11, size=2)
        x = rng.normal(size=(1, 1, h, w))
        got = T.resize_bilinear(T.Tensor(x), int(oh), int(ow)).data[0, 0]
        want = oracles.bilinear_naive(x[0, 0], int(oh), int(ow))
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_resize_bilinear_constant_image_stays_constant(f64):
    x = T.Tensor(np.full((1, 3, 4, 4), 0.7))
    out = T.resize_bilinear(x, 13, 9).data
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-15)


# ---------------------------------------------------------------------------
# tape semantics


def test_backward_accumulates_on_leaves():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.sum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0], rtol=1e-6)


def test_backward_requires_scalar_loss():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, x))


def test_backward_twice_on_same_graph_raises():
    x = T.Tensor([1.0], requires_grad=True)
    loss = T.sum(T.square(x))
    T.backward(loss)
    with pytest.raises(T.TapeError):
        T.backward(loss)


def test_backward_on_constant_raises():
    with pytest.raises(T.TapeError):
        T.backward(T.sum(T.Tensor([1.0, 2.0])))


def test_reused_input_accumulates_both_paths():
    x = T.Tensor([3.0], requires_grad=True)
    T.backward(T.sum(T.add(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0])


def test_grad_accumulates_across_backward_calls_until_zeroed():
    x = T.Tensor([1.0], requires_grad=True)
    T.backward(T.sum(x))
    T.backward(T.sum(x))
    np.testing.assert_array_equal(x.grad, [2.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0])


def test_no_grad_suppresses_recording():
    x = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        out = T.square(x)
    assert out.requires_grad is False
    assert out._tape is None


def test_ops_on_constants_do_not_grow_tape():
    before = len(T.current_tape().entries)
    T.square(T.add(T.Tensor([1.0]), T.Tensor([2.0])))
    assert len(T.current_tape().entries) == before


def test_chain_through_many_ops(f64):
    """d/dx of sum(relu(x*2 + 1)) with all x*2+1 > 0 is exactly 2 per element."""
    x = T.Tensor([0.5, 1.0, 2.0], requires_grad=True)
    loss = T.sum(T.relu(T.add(T.mul(x, 2.0), 1.0)))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_grad_is_none_for_untouched_parameter():
    x = T.Tensor([1.0], requires_grad=True)
    y = T.Tensor([1.0], requires_grad=True)
    T.backward(T.sum(T.square(x)))
    assert y.grad is None


def test_branchy_graph_gradients(f64):
    # z = a*b + a  =>  dz/da = b + 1, dz/db = a
    a = T.Tensor([2.0], requires_grad=True)
    b = T.Tensor([5.0], requires_grad=True)
    T.backward(T.sum(T.add(T.mul(a, b), a)))
    np.testing.assert_array_equal(a.grad, [6.0])
    np.testing.assert_array_equal(b.grad, [2.0])


def test_forward_values_are_deterministic(rng):
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(w), stride=2, padding=1).data
    assert (a == b).all()
