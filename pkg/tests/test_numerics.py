import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquila import numerics as nx
from aquila.errors import EmptyLossError, NumericError, ShapeError


def check_grad(build, *arrays, tol=1e-7):
    """Compare the tape gradient of ``sum(w * build(*tensors))`` with central differences."""
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.random.default_rng(7).standard_normal(out.dims)
    nx.sum_all(nx.mul(out, weights)).backward()
    for t in tensors:
        def f(_):
            return float(np.sum(build(*[nx.Tensor(u.data) for u in tensors]).data * weights))

        numeric = nx.finite_diff_grad(f, t.data)
        assert nx.relative_error(t.grad, numeric) <= tol


def test_matmul_example():
    a = nx.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nx.Tensor([[5.0], [6.0]])
    np.testing.assert_array_equal(nx.matmul(a, b).data, [[17.0], [39.0]])


def test_matmul_rejects_mismatched_inner_dims():
    with pytest.raises(ShapeError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_uniform_and_shift_invariance(rng):
    np.testing.assert_allclose(nx.softmax_rows(np.zeros((2, 4))).data, 0.25)
    x = rng.standard_normal((3, 5))
    np.testing.assert_allclose(nx.softmax_rows(x).data, nx.softmax_rows(x + 100.0).data, atol=1e-12)


def test_softmax_mask_gives_exact_zeros():
    p = nx.softmax_rows(np.array([[1.0, 2.0, 3.0]]), np.array([[True, False, True]])).data
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], np.exp([1.0, 3.0]) / np.exp([1.0, 3.0]).sum())


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        nx.softmax_rows(np.array([[1.0, np.nan]]))


def test_layer_norm_matches_formula(rng):
    x = rng.standard_normal((4, 6))
    g, b = rng.standard_normal(6), rng.standard_normal(6)
    want = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b
    np.testing.assert_allclose(nx.layer_norm(x, g, b).data, want, atol=1e-12)


def test_cross_entropy_uniform_is_log_v():
    loss = nx.cross_entropy(np.zeros((3, 7)), [0, 3, 6])
    assert float(loss.data) == pytest.approx(math.log(7), abs=1e-12)


def test_cross_entropy_all_masked_is_an_error():
    with pytest.raises(EmptyLossError):
        nx.cross_entropy(np.zeros((2, 3)), [0, 1], [False, False])


def test_frozen_tensors_record_no_graph():
    a = nx.Tensor(np.ones(3))
    out = nx.mul(a, 2.0)
    assert not out.requires_grad and out._parents == ()


def test_gradient_accumulates_through_reuse():
    a = nx.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    nx.sum_all(nx.mul(a, a)).backward()
    np.testing.assert_allclose(a.grad, [2.0, 4.0])


def test_finite_diff_restores_input(rng):
    x = rng.standard_normal(5)
    before = x.copy()
    g = nx.finite_diff_grad(lambda v: float(np.sum(v**3)), x)
    np.testing.assert_array_equal(x, before)
    np.testing.assert_allclose(g, 3 * before**2, rtol=1e-8)


def test_relative_error_is_normwise():
    assert nx.relative_error(np.array([1.0, 0.0]), np.array([1.0, 1e-3])) == pytest.approx(1e-3)
    assert nx.relative_error(np.zeros(2), np.zeros(2)) == 0.0


@pytest.mark.parametrize(
    "name, build, shapes",
    [
        ("add_broadcast", lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
        ("mul_broadcast", lambda a, b: nx.mul(a, b), [(2, 3, 4), (3, 1)]),
        ("matmul_batched", lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
        ("linear", lambda x, w, b: nx.linear(x, w, b), [(2, 5, 3), (4, 3), (4,)]),
        ("gelu", lambda x: nx.gelu(x), [(3, 4)]),
        ("transpose", lambda x: nx.transpose(x, (1, 2, 0)), [(2, 3, 4)]),
        ("reshape", lambda x: nx.reshape(x, (6, 2)), [(3, 4)]),
        ("concat", lambda a, b: nx.concat([a, b], axis=-2), [(2, 3, 4), (2, 1, 4)]),
        ("getitem", lambda x: nx.getitem(x, (Ellipsis, slice(1, 3), slice(None))), [(2, 4, 3)]),
        ("softmax", lambda x: nx.softmax_rows(x), [(3, 5)]),
        ("layer_norm", lambda x, g, b: nx.layer_norm(x, g, b), [(2, 3, 6), (6,), (6,)]),
    ],
)
def test_op_gradients(name, build, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    check_grad(build, *[rng.standard_normal(s) for s in shapes])


def test_take_gradient_with_repeated_indices(rng):
    idx = np.array([[0, 2], [2, 2]])
    check_grad(lambda a: nx.take(a, idx, axis=0), rng.standard_normal((3, 4)))


def test_masked_softmax_gradient(rng):
    mask = np.tril(np.ones((4, 4), dtype=bool))
    check_grad(lambda x: nx.softmax_rows(x, mask), rng.standard_normal((4, 4)))


def test_cross_entropy_gradient(rng):
    targets = np.array([1, 0, 3, 2])
    mask = np.array([True, False, True, True])
    check_grad(lambda z: nx.cross_entropy(z, targets, mask), rng.standard_normal((4, 5)))


def test_dropout_is_identity_without_rng_and_scales_kept_entries(rng):
    x = np.ones((200, 50))
    np.testing.assert_array_equal(nx.dropout(x, 0.5, None).data, x)
    y = nx.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(y)) == {0.0, 2.0}


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=20.0, size=(rows, cols))
    p = nx.softmax_rows(x).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p >= 0.0)


@settings(max_examples=20, deadline=None)
@given(
    m=st.integers(1, 4),
    k=st.integers(1, 4),
    n=st.integers(1, 4),
    seed=st.integers(0, 2**16),
)
def test_matmul_gradient_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    check_grad(nx.matmul, rng.standard_normal((m, k)), rng.standard_normal((k, n)))
