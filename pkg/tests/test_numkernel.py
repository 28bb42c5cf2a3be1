import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icefuse import numkernel as nk


def test_matmul_identity():
    out = nk.matmul(nk.Tensor(np.eye(2)), nk.Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[5.0, 6.0], [7.0, 8.0]])


def test_matmul_hand_expansion():
    out = nk.matmul(nk.Tensor([[1.0, 2.0], [3.0, 4.0]]), nk.Tensor([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_rule():
    out = nk.matmul(nk.Tensor(np.ones((2, 3))), nk.Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)


def test_matmul_shape_mismatch():
    with pytest.raises(nk.ContractError):
        nk.matmul(nk.Tensor(np.ones((2, 3))), nk.Tensor(np.ones((2, 3))))


def test_softmax_symmetry():
    out = nk.softmax_lastdim(nk.Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = nk.softmax_lastdim(nk.Tensor([1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    assert np.allclose(out.data, [0.5, 0.5])


def test_softmax_closed_form():
    out = nk.softmax_lastdim(nk.Tensor([0.0, np.log(3.0)]))
    assert np.allclose(out.data, [0.25, 0.75], atol=1e-15)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariance_and_normalization(values, c):
    x = np.array(values)
    a = nk.softmax_lastdim(nk.Tensor(x)).data
    b = nk.softmax_lastdim(nk.Tensor(x + c)).data
    assert abs(a.sum() - 1.0) <= 1e-12
    assert np.allclose(a, b, atol=1e-12)


def test_backward_sum_of_squares():
    x = nk.Tensor([1.0, 2.0], requires_grad=True)
    loss = nk.tsum(nk.mul(x, x))
    nk.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0])


def test_backward_untouched_tensor_has_no_gradient():
    x = nk.Tensor([1.0, 2.0], requires_grad=True)
    y = nk.Tensor([3.0], requires_grad=True)
    nk.backward(nk.tsum(nk.mul(y, y)))
    assert x.grad is None or np.all(x.grad == 0.0)


def test_backward_rejects_nonscalar_loss():
    x = nk.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(nk.ContractError):
        nk.backward(nk.mul(x, x))


def test_backward_accumulates_across_reuse():
    x = nk.Tensor([3.0], requires_grad=True)
    loss = nk.tsum(nk.add(nk.mul(x, x), x))  # x^2 + x -> 2x + 1 = 7
    nk.backward(loss)
    assert np.allclose(x.grad, [7.0])


def test_two_backward_passes_bitwise_identical():
    rng = np.random.default_rng(7)
    w = nk.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    x = nk.Tensor(rng.normal(size=(2, 4)))

    def build():
        return nk.tsum(nk.softmax_lastdim(nk.matmul(x, w)))

    loss = build()
    nk.backward(loss)
    first = w.grad.copy()
    w.zero_grad()
    for node in (loss,):
        pass  # grads on intermediates are stale but unused on a fresh pass
    loss2 = build()
    nk.backward(loss2)
    assert first.tobytes() == w.grad.tobytes()


def test_composed_chain_matches_finite_differences():
    rng = np.random.default_rng(0)
    w = nk.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    x = nk.Tensor(rng.normal(size=(2, 3)))
    mix = nk.Tensor(rng.normal(size=(2, 3)))

    def f():
        return nk.tsum(nk.mul(nk.softmax_lastdim(nk.matmul(x, w)), mix))

    err = nk.grad_check(f, [w], step=1e-5)
    assert err < 1e-6


def test_grad_check_affine():
    w = nk.Tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    x = nk.Tensor([[2.0, 1.0]])

    def f():
        return nk.tsum(nk.matmul(x, w))

    assert nk.grad_check(f, [w]) < 1e-8


def test_grad_check_detects_corrupted_gradient():
    # doubled analytic gradient: |2n - n| / max(|2n|, |n|) = 0.5
    w = nk.Tensor([1.5, -0.5], requires_grad=True)

    class Doubled(nk.Tensor):
        pass

    def f():
        out = nk.tsum(nk.mul(w, w))
        inner = out._backward
        out._backward = lambda g: inner(2.0 * g)
        return out

    err = nk.grad_check(f, [w])
    assert err > 0.4


def test_grad_check_zero_parameters_vacuous():
    assert nk.grad_check(lambda: nk.tsum(nk.Tensor([1.0])), []) == 0.0


def _random_tensor(rng, shape):
    return nk.Tensor(rng.normal(size=shape), requires_grad=True)


@pytest.mark.parametrize("name", [
    "add", "sub", "mul", "neg", "scale", "shift", "matmul", "batched_matmul",
    "softmax", "layer_norm", "gelu", "sigmoid", "softplus", "log", "absolute",
    "reshape", "transpose", "tsum", "tmean", "gather",
])
def test_primitive_gradients_match_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    if name in ("add", "sub", "mul"):
        a, b = _random_tensor(rng, (3, 4)), _random_tensor(rng, (3, 4))
        w = nk.Tensor(rng.normal(size=(3, 4)))
        op = getattr(nk, name)
        f = lambda: nk.tsum(nk.mul(op(a, b), w))
        params = [a, b]
    elif name == "neg":
        a = _random_tensor(rng, (5,))
        f, params = lambda: nk.tsum(nk.mul(nk.neg(a), a)), [a]
    elif name == "scale":
        a = _random_tensor(rng, (5,))
        f, params = lambda: nk.tsum(nk.scale(a, 2.5)), [a]
    elif name == "shift":
        a = _random_tensor(rng, (5,))
        f, params = lambda: nk.tsum(nk.mul(nk.shift(a, 1.5), a)), [a]
    elif name == "matmul":
        a, b = _random_tensor(rng, (3, 4)), _random_tensor(rng, (4, 2))
        f, params = lambda: nk.tsum(nk.matmul(a, b)), [a, b]
    elif name == "batched_matmul":
        a, b = _random_tensor(rng, (2, 3, 4)), _random_tensor(rng, (2, 4, 2))
        f, params = lambda: nk.tsum(nk.matmul(a, b)), [a, b]
    elif name == "softmax":
        a = _random_tensor(rng, (3, 5))
        w = nk.Tensor(rng.normal(size=(3, 5)))
        f, params = lambda: nk.tsum(nk.mul(nk.softmax_lastdim(a), w)), [a]
    elif name == "layer_norm":
        a = _random_tensor(rng, (3, 6))
        g, b = _random_tensor(rng, (6,)), _random_tensor(rng, (6,))
        w = nk.Tensor(rng.normal(size=(3, 6)))
        f = lambda: nk.tsum(nk.mul(nk.layer_norm(a, g, b), w))
        params = [a, g, b]
    elif name in ("gelu", "sigmoid", "softplus"):
        a = _random_tensor(rng, (7,))
        op = getattr(nk, name)
        f, params = lambda: nk.tsum(op(a)), [a]
    elif name == "log":
        a = nk.Tensor(rng.uniform(0.5, 3.0, size=(6,)), requires_grad=True)
        f, params = lambda: nk.tsum(nk.log(a)), [a]
    elif name == "absolute":
        a = nk.Tensor(rng.uniform(0.5, 2.0, size=(6,)) * np.array([1, -1, 1, -1, 1, -1]),
                      requires_grad=True)
        f, params = lambda: nk.tsum(nk.absolute(a)), [a]
    elif name == "reshape":
        a = _random_tensor(rng, (2, 6))
        w = nk.Tensor(rng.normal(size=(3, 4)))
        f, params = lambda: nk.tsum(nk.mul(nk.reshape(a, (3, 4)), w)), [a]
    elif name == "transpose":
        a = _random_tensor(rng, (2, 3, 4))
        w = nk.Tensor(rng.normal(size=(4, 2, 3)))
        f, params = lambda: nk.tsum(nk.mul(nk.transpose(a, (2, 0, 1)), w)), [a]
    elif name == "tsum":
        a = _random_tensor(rng, (4, 2))
        f, params = lambda: nk.tsum(a), [a]
    elif name == "tmean":
        a = _random_tensor(rng, (4, 2))
        f, params = lambda: nk.tmean(nk.mul(a, a)), [a]
    elif name == "gather":
        a = _random_tensor(rng, (8,))
        idx = np.array([0, 3, 3, 7])
        w = nk.Tensor(rng.normal(size=(4,)))
        f, params = lambda: nk.tsum(nk.mul(nk.gather(a, idx), w)), [a]
    err = nk.grad_check(f, params, step=1e-4)
    assert err < 1e-5, f"{name}: {err}"


def test_gather_requires_flat_tensor():
    with pytest.raises(nk.ContractError):
        nk.gather(nk.Tensor(np.ones((2, 2))), [0])


@settings(max_examples=25)
@given(st.integers(0, 2**32 - 1))
def test_mixed_rank_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    w = _random_tensor(rng, (3, 2))
    x = nk.Tensor(rng.normal(size=(2, 4, 3)))
    f = lambda: nk.tsum(nk.matmul(x, w))
    assert nk.grad_check(f, [w], step=1e-4) < 1e-5
