import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nexus import gradcheck
from nexus import tensor as T
from nexus.tensor import DimensionError, NumericError, TapeError, Tensor


def test_matmul_identity():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_basis_selection():
    assert T.matmul(Tensor([[1.0, 0.0]]), Tensor([[5.0], [7.0]])).data.tolist() == [[5.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            acc = 0.0
            for k in range(4):
                acc += a[i, k] * b[k, j]
            ref[i, j] = acc
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-14)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


@pytest.mark.parametrize("row, want", [([0.0, 0.0, 0.0], [1 / 3] * 3),
                                       ([0.0, np.log(3.0)], [0.25, 0.75]),
                                       ([1000.0, 1000.0], [0.5, 0.5])])
def test_softmax_examples(row, want):
    np.testing.assert_allclose(T.softmax_rows(Tensor([row])).data[0], want, rtol=0, atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    y = T.softmax_rows(Tensor(x)).data
    assert np.all(y > 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
    with T.Tape():
        T.tensor_sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_square():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with T.Tape():
        T.tensor_sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_diamond_accumulates_both_paths():
    # y = relu(x) * (3x) ; x > 0  =>  dy/dx = 6x
    x = Tensor([0.5, 2.0], requires_grad=True)
    with T.Tape():
        a = T.relu(x)
        b = T.scale(x, 3.0)
        T.tensor_sum(a * b).backward()
    np.testing.assert_allclose(x.grad, [3.0, 12.0], rtol=0, atol=1e-15)


def test_backward_non_scalar_root_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape():
        y = x * x
        with pytest.raises(TapeError):
            y.backward()


def test_double_replay_rejected():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.tensor_sum(x * x)
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)


def test_replay_order_is_reverse_of_recording():
    order = []
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape:
        a = T._make(x.data * 2, (x,), lambda g: (order.append("a") or g * 2,))
        b = T._make(a.data + 1, (a,), lambda g: (order.append("b") or g,))
        tape.backward(T.tensor_sum(b))
    assert order == ["b", "a"]


def test_relu_examples_and_subgradient():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    with T.Tape():
        y = T.relu(x)
        T.tensor_sum(y).backward()
    assert y.data.tolist() == [0.0, 0.0, 2.0]
    assert x.grad.tolist() == [0.0, 0.0, 1.0]


def test_add_zeros_bit_identical():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
    assert np.array_equal(T.add(x, T.zeros_like(x)).data, x.data)


def test_reshape_preserves_row_major_order():
    x = Tensor(np.arange(12.0).reshape(2, 6))
    np.testing.assert_array_equal(T.reshape(x, (3, 4)).data.ravel(), np.arange(12.0))


@pytest.mark.parametrize("sa, sb", [((2, 3), (3, 2)), ((2, 3), (3,)), ((2, 3, 4), (3, 1))])
def test_general_broadcasting_rejected(sa, sb):
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(sa)), Tensor(np.zeros(sb)))


def test_allowed_broadcasts():
    x = Tensor(np.ones((2, 3, 2, 2)))
    assert T.add(x, Tensor(np.ones((1, 3, 1, 1)))).shape == (2, 3, 2, 2)
    assert T.mul(x, Tensor([2.0])).shape == (2, 3, 2, 2)
    assert (x + 1.0).shape == (2, 3, 2, 2)


def test_grads_are_finite_and_shaped():
    rng = np.random.default_rng(1)
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    x = Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    with T.Tape():
        T.mean(T.silu(T.matmul(x, w))).backward()
    for t in (w, x):
        assert t.grad.shape == t.shape and np.all(np.isfinite(t.grad))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.Tape() as tape, T.no_grad():
        y = x * x
    assert len(tape) == 0 and not y.requires_grad


def test_every_primitive_matches_finite_differences():
    results = gradcheck.primitive_checks(seed=0)
    bad = [(r.name, r.rel_err) for r in results if not r.ok]
    assert not bad, bad
    assert all(r.tol == 1e-4 for r in results)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_primitive_gradients_random_seeds(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    assert gradcheck.check("matmul", T.matmul, [a, b]).ok
    assert gradcheck.check("softmax", T.softmax_rows, [rng.uniform(-2, 2, (2, 5))]).ok
    x = rng.uniform(-2, 2, (1, 2, 4, 4))
    w = rng.uniform(-2, 2, (2, 1, 3, 3))
    assert gradcheck.check("conv", lambda x, w: T.conv2d(x, w, None, 1, 1, 2), [x, w]).ok


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((2, 4, 6, 6)), requires_grad=True)
        w = Tensor(rng.standard_normal((4, 2, 3, 3)), requires_grad=True)
        with T.Tape():
            T.mean(T.conv2d(x, w, None, 1, 1, 2)).backward()
        return x.grad, w.grad

    (a1, b1), (a2, b2) = run(), run()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_nxtn_round_trip(dtype):
    arr = np.random.default_rng(0).standard_normal((2, 3, 4)).astype(dtype)
    buf = T.tensor_to_bytes(arr)
    assert buf[:4] == bytes.fromhex("4E58544E")
    assert buf[4] == 1 and buf[5] == 3 and buf[6] == (1 if dtype == np.float64 else 2) and buf[7] == 0
    assert int.from_bytes(buf[8:16], "little") == 2
    out, end = T.tensor_from_bytes(buf)
    assert end == len(buf) and out.dtype == dtype
    np.testing.assert_array_equal(out, arr)
