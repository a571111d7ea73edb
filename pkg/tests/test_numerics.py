import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scale import numerics as nx
from scale.numerics import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@pytest.fixture(autouse=True)
def _float64():
    with nx.precision("float64"):
        yield


def test_l2_normalize_examples():
    np.testing.assert_allclose(nx.l2_normalize(Tensor([3.0, 4.0])).data, [0.6, 0.8])
    np.testing.assert_allclose(nx.l2_normalize(Tensor([2.0, 0.0, 0.0])).data, [1.0, 0.0, 0.0])
    u = np.array([0.6, 0.0, -0.8])
    np.testing.assert_allclose(nx.l2_normalize(Tensor(u)).data, u, atol=1e-15)


def test_l2_normalize_zero_norm_raises():
    with pytest.raises(ZeroDivisionError):
        nx.l2_normalize(Tensor([0.0, 0.0]))


@given(arrays(np.float64, st.integers(1, 8), elements=finite).filter(lambda a: np.linalg.norm(a) > 1e-6))
def test_l2_normalize_unit_norm(x):
    assert abs(np.linalg.norm(nx.l2_normalize(Tensor(x)).data) - 1) <= 1e-6


def test_row_softmax_examples():
    np.testing.assert_allclose(nx.row_softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(nx.row_softmax([0.0, math.log(3)]), [0.25, 0.75], atol=1e-15)


@given(arrays(np.float64, st.integers(1, 10), elements=finite), finite,
       st.floats(0.05, 10))
def test_row_softmax_sums_to_one_and_is_shift_invariant(x, shift, tau):
    p = nx.row_softmax(x, tau)
    assert np.all(p > 0) or np.all(p >= 0)
    assert abs(p.sum() - 1) <= 1e-9
    np.testing.assert_allclose(nx.row_softmax(x + shift, tau), p, atol=1e-12)


def test_softmax_rejects_nonpositive_temperature():
    with pytest.raises(ValueError):
        nx.row_softmax([1.0, 2.0], 0.0)


def test_layer_norm_examples():
    ones, zeros = np.ones(3), np.zeros(3)
    out = nx.layer_norm(Tensor([1.0, 2.0, 3.0]), ones, zeros, eps=0.0).data
    np.testing.assert_allclose(out, [-1.2247, 0.0, 1.2247], atol=1e-3)
    np.testing.assert_array_equal(nx.layer_norm(Tensor([5.0, 5.0, 5.0]), ones, zeros, eps=1e-5).data, zeros)
    np.testing.assert_array_equal(nx.layer_norm(Tensor([1.0, 2.0, 3.0]), zeros, np.full(3, 0.7)).data,
                                  np.full(3, 0.7))


def test_layer_norm_population_variance():
    x = np.random.default_rng(0).standard_normal((4, 7))
    out = nx.layer_norm(Tensor(x), np.ones(7), np.zeros(7), eps=0.0).data
    np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1, atol=1e-12)


def test_grad_check_examples():
    x = Tensor([3.0], requires_grad=True)
    assert nx.grad_check(lambda: nx.sum(x * x), [x], step=1e-5) <= 1e-6
    x.zero_grad()
    nx.sum(x * x).backward()
    np.testing.assert_allclose(x.grad, [6.0])
    c = Tensor([1.5, -2.0], requires_grad=True)
    assert nx.grad_check(lambda: nx.sum(c * 0.0) + 7.0, [c]) <= 1e-8


def test_grad_check_requires_float64():
    with nx.precision("float32"):
        x = Tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        nx.grad_check(lambda: nx.sum(x), [x])


def _leaf(rng, *shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def _weights(rng, shape):
    return rng.standard_normal(shape)


# op name -> builder(rng) returning (scalar closure, leaves)
def _case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    w = _weights(rng, (3, 2))
    return lambda: nx.sum(nx.matmul(a, b) * w), [a, b]


def _case_matmul_batched(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    w = _weights(rng, (2, 3, 5))
    return lambda: nx.sum(nx.matmul(a, b) * w), [a, b]


def _case_matmul_shared(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = _weights(rng, (2, 3, 5))
    return lambda: nx.sum(nx.matmul(a, b) * w), [a, b]


def _case_add_broadcast(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    w = _weights(rng, (3, 4))
    return lambda: nx.sum(nx.add(a, b) * w), [a, b]


def _case_sub_mul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    return lambda: nx.sum(nx.mul(nx.sub(a, b), a)), [a, b]


def _case_concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 5)
    w = _weights(rng, (2, 8))
    return lambda: nx.sum(nx.concat([a, b], axis=1) * w), [a, b]


def _case_mean(rng):
    a = _leaf(rng, 3, 4, 2)
    w = _weights(rng, (3, 2))
    return lambda: nx.sum(nx.mean(a, axis=1) * w), [a]


def _case_gelu(rng):
    a = _leaf(rng, 5, 3)
    w = _weights(rng, (5, 3))
    return lambda: nx.sum(nx.gelu(a) * w), [a]


def _case_embedding(rng):
    table = _leaf(rng, 5, 3)
    idx = rng.integers(0, 5, size=(2, 4))
    w = _weights(rng, (2, 4, 3))
    return lambda: nx.sum(nx.embedding(table, idx) * w), [table]


def _case_layer_norm(rng):
    x, g, b = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    w = _weights(rng, (3, 6))
    return lambda: nx.sum(nx.layer_norm(x, g, b, 1e-5) * w), [x, g, b]


def _case_softmax(rng):
    x = _leaf(rng, 3, 5)
    w = _weights(rng, (3, 5))
    return lambda: nx.sum(nx.softmax(x, axis=-1, temperature=0.7) * w), [x]


def _case_log_softmax(rng):
    x = _leaf(rng, 3, 5)
    w = _weights(rng, (3, 5))
    return lambda: nx.sum(nx.log_softmax(x) * w), [x]


def _case_cross_entropy(rng):
    x = _leaf(rng, 4, 6)
    t = rng.integers(0, 6, size=4)
    return lambda: nx.mean(nx.cross_entropy(x, t)), [x]


def _case_l2_normalize(rng):
    x = _leaf(rng, 3, 4)
    w = _weights(rng, (3, 4))
    return lambda: nx.sum(nx.l2_normalize(x) * w), [x]


def _case_index_shape(rng):
    x = _leaf(rng, 2, 3, 4)
    perm = np.stack([rng.permutation(3), rng.permutation(3)])
    w = _weights(rng, (8, 2))
    return lambda: nx.sum(nx.permute(x, perm, axis=1).transpose(0, 2, 1)[:, :, 1:3].reshape(8, 2) * w), [x]


def _case_where_broadcast(rng):
    a, b = _leaf(rng, 4), _leaf(rng, 3, 4)
    cond = rng.random((3, 1)) < 0.5
    w = _weights(rng, (2, 3, 4))
    return lambda: nx.sum(nx.broadcast_to(nx.where(cond, a, b), (2, 3, 4)) * w), [a, b]


def _case_fancy_getitem(rng):
    x = _leaf(rng, 6, 2)
    idx = np.array([0, 3, 3, 5])
    w = _weights(rng, (4, 2))
    return lambda: nx.sum(nx.getitem(x, idx) * w), [x]


CASES = {name[len("_case_"):]: fn for name, fn in globals().items() if name.startswith("_case_")}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    for seed in range(10):
        f, leaves = CASES[name](np.random.default_rng(seed))
        assert nx.grad_check(f, leaves, step=1e-5) <= 1e-4, (name, seed)


def test_ops_are_pure():
    rng = np.random.default_rng(3)
    x, g, b = rng.standard_normal((4, 8)), rng.standard_normal(8), rng.standard_normal(8)
    first = nx.gelu(nx.layer_norm(Tensor(x), g, b)).data
    second = nx.gelu(nx.layer_norm(Tensor(x), g, b)).data
    assert first.tobytes() == second.tobytes()


def test_gradients_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nx.sum(x * 3.0).backward()
    nx.sum(x * 3.0).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    y = x * x
    nx.sum(y + y * x).backward()
    # d/dx (x^2 + x^3) = 2x + 3x^2
    np.testing.assert_allclose(x.grad, [4.0 + 12.0])


def test_precision_modes():
    with nx.precision("float32"):
        assert Tensor([1.0]).data.dtype == np.float32
        t = Tensor([1.0], requires_grad=True)
        assert (t + 1.5).data.dtype == np.float32
    assert Tensor([1.0]).data.dtype == np.float64
    with pytest.raises(ValueError):
        with nx.precision("float16"):
            pass


def test_outputs_stay_finite():
    rng = np.random.default_rng(1)
    x = Tensor(rng.standard_normal((5, 7)) * 100)
    for out in (nx.softmax(x), nx.log_softmax(x), nx.gelu(x), nx.layer_norm(x, np.ones(7), np.zeros(7)),
                nx.l2_normalize(x), nx.cross_entropy(x, np.zeros(5, dtype=int))):
        assert np.all(np.isfinite(out.data))
