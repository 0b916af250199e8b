import numpy as np
import pytest

from gradcheck import check_grads
from selfsv import tensor as T
from selfsv.tensor import GraphError, ShapeError, Tensor


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3)).astype(np.float32)
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_allclose(out.data, a, atol=1e-6)


def test_matmul_1x1():
    out = T.matmul(Tensor([[2.0]]), Tensor([[3.0]]))
    assert out.data[0, 0] == pytest.approx(6.0)


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5))
    b = rng.normal(size=(5, 3))
    want = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
    np.testing.assert_allclose(got.data, want, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-6)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 6))
    a = T.softmax(Tensor(x)).data
    b = T.softmax(Tensor(x + 17.5)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_softmax_large_magnitude_stable():
    out = T.softmax(Tensor([1000.0, 0.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-6)
    rng = np.random.default_rng(3)
    x = rng.uniform(-1e4, 1e4, size=(8, 5)).astype(np.float32)
    rows = T.softmax(Tensor(x)).data.sum(axis=-1)
    np.testing.assert_allclose(rows, 1.0, atol=1e-6)


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.zeros((3, 0))))


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 5), 7.0))
    out = T.layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-4)


def test_layer_norm_row_statistics():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(3, 16)), dtype=np.float64)
    beta = rng.normal(size=16)
    out = T.layer_norm(x, Tensor(np.ones(16), dtype=np.float64), Tensor(beta, dtype=np.float64))
    np.testing.assert_allclose(out.data.mean(axis=-1), beta.mean(), atol=1e-6)
    pre = T.layer_norm(
        x, Tensor(np.ones(16), dtype=np.float64), Tensor(np.zeros(16), dtype=np.float64)
    )
    np.testing.assert_allclose(pre.data.std(axis=-1), 1.0, atol=1e-2)


def test_layer_norm_zero_gamma_gives_beta():
    rng = np.random.default_rng(5)
    beta = rng.normal(size=6)
    out = T.layer_norm(Tensor(rng.normal(size=(4, 6))), Tensor(np.zeros(6)), Tensor(beta))
    np.testing.assert_allclose(out.data, np.broadcast_to(beta, (4, 6)), atol=1e-6)


def test_cross_entropy_uniform_is_log_k():
    out = T.cross_entropy(Tensor(np.zeros((2, 7))), np.array([0, 4]))
    assert out.item() == pytest.approx(np.log(7.0), abs=1e-6)


def test_cross_entropy_confident_is_near_zero():
    logits = np.zeros((1, 5), dtype=np.float32)
    logits[0, 2] = 1e4
    out = T.cross_entropy(Tensor(logits), np.array([2]))
    assert out.item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_log_sum_exp_oracle():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 5))
    labels = np.array([1, 4, 0])
    # direct formula: mean over rows of log(sum exp) - logit_true
    want = np.mean(
        [np.log(np.sum(np.exp(logits[i]))) - logits[i, labels[i]] for i in range(3)]
    )
    got = T.cross_entropy(Tensor(logits, dtype=np.float64), labels)
    assert got.item() == pytest.approx(want, abs=1e-5)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_gelu_values():
    out = T.gelu(Tensor([0.0, 8.0, -8.0]))
    assert out.data[0] == pytest.approx(0.0, abs=1e-7)
    assert out.data[1] == pytest.approx(8.0, abs=1e-5)
    assert out.data[2] == pytest.approx(0.0, abs=1e-5)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        T.mul_scalar(x, 2.0).backward()


def test_backward_off_path_grad_absent():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    T.sum_(T.mul_scalar(x, 2.0)).backward()
    assert y.grad is None


def test_backward_accumulates_across_uses():
    x = Tensor(np.array([3.0]), requires_grad=True)
    T.sum_(T.add(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0])


def test_matmul_chain_finite_differences():
    rng = np.random.default_rng(7)
    arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5, 2))]
    check_grads(lambda ts: T.sum_(T.matmul(T.matmul(ts[0], ts[1]), ts[2])), arrays)


def test_softmax_cross_entropy_finite_differences():
    rng = np.random.default_rng(8)
    labels = np.array([2, 0, 3])
    check_grads(
        lambda ts: T.cross_entropy(ts[0], labels), [rng.normal(size=(3, 5))]
    )


def test_conv1d_shape_formula():
    x = Tensor(np.zeros((2, 3, 50)))
    w = Tensor(np.zeros((4, 3, 5)))
    out = T.conv1d(x, w, stride=3, padding=2, dilation=2)
    t_out = (50 + 2 * 2 - 2 * (5 - 1) - 1) // 3 + 1
    assert out.shape == (2, 4, t_out)


def test_conv1d_width_one_identity():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 1, 10)).astype(np.float32)
    out = T.conv1d(Tensor(x), Tensor(np.ones((1, 1, 1))))
    np.testing.assert_allclose(out.data, x, atol=1e-6)


def test_conv1d_hand_case():
    # x = [1,2,3,4], w = [1,0,-1], valid conv: [1-3, 2-4] = [-2,-2]
    x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    w = Tensor(np.array([[[1.0, 0.0, -1.0]]]))
    out = T.conv1d(x, w)
    np.testing.assert_allclose(out.data, [[[-2.0, -2.0]]], atol=1e-6)


def test_conv1d_input_too_short():
    with pytest.raises(ShapeError):
        T.conv1d(Tensor(np.zeros((1, 1, 4))), Tensor(np.zeros((1, 1, 5))))


def test_conv1d_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(2, 4, 12))
    w = rng.normal(size=(6, 4, 3))
    b = rng.normal(size=(6,))
    check_grads(
        lambda ts: T.sum_(
            T.mul(T.conv1d(ts[0], ts[1], ts[2], stride=2, padding=1), Tensor(np.ones((2, 6, 6)), dtype=np.float64))
        ),
        [x, w, b],
    )


def test_assert_finite_raises_on_nan():
    x = Tensor(np.array([1.0, np.nan]))
    with pytest.raises(FloatingPointError) as err:
        x.assert_finite("encoder layer 3")
    assert "encoder layer 3" in str(err.value)


def test_embedding_gathers_and_accumulates():
    w = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    idx = np.array([1, 1, 3])
    out = T.embedding(w, idx)
    np.testing.assert_allclose(out.data, w.data[idx])
    T.sum_(out).backward()
    want = np.zeros((4, 3))
    want[1] = 2.0
    want[3] = 1.0
    np.testing.assert_array_equal(w.grad, want)


def test_default_dtype_is_float32():
    assert Tensor(np.zeros(3, dtype=np.float64)).data.dtype == np.float32
