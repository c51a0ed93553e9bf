import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from longscore import autograd as ag
from longscore.errors import (ConfigurationError, ContractError, DimensionError, LabelError,
                              VocabularyError)
from gradutil import TOL, gradcheck
from oracles import central_difference, naive_conv, relative_error

T = ag.Tensor


def test_matmul_examples():
    out = ag.matmul(T(np.eye(2)), T([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])
    assert ag.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_of_sum_is_ones_times_bT():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    A = ag.parameter(a)
    with ag.Tape() as tape:
        ag.backward((A @ T(b)).sum(), tape)
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ b.T, rtol=1e-12)
    (num,) = central_difference(lambda x: float((x @ b).sum()), [a.copy()])
    assert relative_error(A.grad, num).max() < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ag.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(ag.softmax_lastaxis(T([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-15)
    p = ag.softmax_lastaxis(T([1000.0, 0.0])).data
    assert np.isfinite(p).all() and p[0] == pytest.approx(1.0) and p[1] < 1e-300
    p = ag.softmax_lastaxis(T(np.log([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(p, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=8),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ag.softmax_lastaxis(T(x)).data
    assert np.all(np.abs(p.sum(axis=-1) - 1.0) <= 1e-12)


def test_masked_softmax_fully_masked_row_is_contract_error():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ContractError):
        ag.masked_softmax(T(np.zeros((2, 2))), mask)


def test_rmsnorm_examples():
    np.testing.assert_allclose(ag.rmsnorm(T([3.0] * 4), T(np.ones(4))).data, np.ones(4), atol=1e-6)
    np.testing.assert_allclose(ag.rmsnorm(T([-2.0, -2.0]), T(np.ones(2))).data, [-1, -1], atol=1e-6)
    x = np.array([1.0, 2.0, 2.0])
    out = ag.rmsnorm(T(x), T([2.0, 2.0, 2.0])).data
    np.testing.assert_allclose(out, 2 * x / math.sqrt(3 + 1e-6), rtol=1e-15)


def test_activation_examples():
    assert ag.activation(T(0.0), "sigmoid").item() == 0.5
    assert ag.activation(T(0.0), "silu").item() == 0.0
    assert ag.activation(T(1.0), "silu").item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert ag.activation(T(1.0), "silu").item() == pytest.approx(0.731058, abs=1e-6)
    with pytest.raises(ConfigurationError):
        ag.activation(T(0.0), "relu")


def test_conv_identity_and_shift_kernels():
    x = np.random.default_rng(0).normal(size=(6, 3))
    ident = np.zeros((4, 3))
    ident[-1] = 1.0
    np.testing.assert_array_equal(ag.causal_depthwise_conv1d(T(x), T(ident)).data, x)
    out = ag.causal_depthwise_conv1d(T([[1.0], [2.0], [3.0]]), T([[1.0], [0.0]]))
    assert out.data.ravel().tolist() == [0.0, 1.0, 2.0]


def test_conv_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    x, k = rng.normal(size=(9, 4)), rng.normal(size=(3, 4))
    np.testing.assert_allclose(ag.causal_depthwise_conv1d(T(x), T(k)).data, naive_conv(x, k), atol=1e-12)


def test_conv_kernel_wider_than_max_is_configuration_error():
    with pytest.raises(ConfigurationError):
        ag.causal_depthwise_conv1d(T(np.ones((4, 2))), T(np.ones((5, 2))), max_width=4)


def test_embedding_examples():
    table = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(ag.embedding_lookup(T(table), [0]).data, table[:1])
    np.testing.assert_array_equal(ag.embedding_lookup(T(table), [1, 0, 3]).data, table[[1, 0, 3]])
    P = ag.parameter(table)
    with ag.Tape() as tape:
        ag.backward(ag.embedding_lookup(P, [2, 2]).sum(), tape)
    expected = np.zeros_like(table)
    expected[2] = 2.0
    np.testing.assert_array_equal(P.grad, expected)


def test_embedding_bad_id_carries_the_id():
    with pytest.raises(VocabularyError) as info:
        ag.embedding_lookup(T(np.ones((4, 2))), [1, 7])
    assert info.value.token_id == 7


def test_cross_entropy_examples():
    assert ag.cross_entropy(T(np.zeros((1, 4))), [2]).item() == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((1, 3))
    logits[0, 1] = 50.0
    assert ag.cross_entropy(T(logits), [1]).item() < 1e-20
    assert ag.cross_entropy(T([[1.0, 2.0]]), [1]).item() == pytest.approx(math.log1p(math.exp(-1)), abs=1e-12)
    assert ag.cross_entropy(T([[1.0, 2.0]]), [1]).item() == pytest.approx(0.313262, abs=1e-6)


def test_cross_entropy_gradient_is_softmax_minus_onehot_over_batch():
    z = np.random.default_rng(2).normal(size=(3, 4))
    Z = ag.parameter(z)
    with ag.Tape() as tape:
        ag.backward(ag.cross_entropy(Z, [0, 3, 1]), tape)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[[0, 1, 2], [0, 3, 1]] -= 1
    np.testing.assert_allclose(Z.grad, p / 3, atol=1e-15)


def test_cross_entropy_bad_target_is_label_error():
    with pytest.raises(LabelError):
        ag.cross_entropy(T(np.zeros((1, 3))), [3])


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-30, 30)),
       st.lists(st.integers(0, 4), min_size=3, max_size=3))
def test_cross_entropy_nonnegative(logits, targets):
    assert ag.cross_entropy(T(logits), targets).item() >= 0.0


def test_backward_examples():
    X = ag.parameter(np.random.default_rng(0).normal(size=(2, 3)))
    with ag.Tape() as tape:
        ag.backward(X.sum(), tape)
    np.testing.assert_array_equal(X.grad, np.ones((2, 3)))
    X = ag.parameter([1.0, 2.0, 3.0])
    with ag.Tape() as tape:
        ag.backward((X * X).sum(), tape)
    np.testing.assert_array_equal(X.grad, [2.0, 4.0, 6.0])


def test_backward_composite_rmsnorm_matmul_against_finite_differences():
    rng = np.random.default_rng(4)
    err = gradcheck(lambda x, w, m: ag.rmsnorm(x, w) @ m, rng.normal(size=(3, 5)),
                    rng.normal(size=5), rng.normal(size=(5, 2)))
    assert err < TOL


def test_backward_rejects_non_scalar_and_foreign_loss():
    X = ag.parameter(np.ones(3))
    with ag.Tape() as tape:
        y = X * 2.0
        with pytest.raises(ContractError):
            ag.backward(y, tape)
        loss = y.sum()
    with pytest.raises(ContractError):
        ag.backward(loss, ag.Tape())


def test_tape_visits_each_node_exactly_once():
    X = ag.parameter(np.arange(4.0))
    with ag.Tape() as tape:
        h = ag.silu(X) * X + ag.exp(X * 0.1)
        loss = ag.softmax_lastaxis(h).sum() + h.mean()
        ag.backward(loss, tape)
    assert tape.visits == len(tape.nodes) > 5


def test_ops_outside_a_tape_are_not_recorded():
    X = ag.parameter(np.ones(2))
    y = (X * 3.0).sum()
    with pytest.raises(ContractError):
        ag.backward(y)


def test_determinism_bit_identical_data_and_grads():
    def run():
        rng = np.random.default_rng(11)
        W = ag.parameter(rng.normal(size=(4, 4)))
        x = ag.Tensor(rng.normal(size=(3, 4)))
        with ag.Tape() as tape:
            out = ag.softmax_lastaxis(ag.rmsnorm(x @ W, ag.Tensor(np.ones(4))))
            ag.backward((out * out).sum(), tape)
        return out.data.tobytes(), W.grad.tobytes()

    assert run() == run()


def test_rope_odd_head_dim_is_configuration_error():
    with pytest.raises(ConfigurationError):
        ag.rope(T(np.ones((2, 3))), [0, 1])


# ---------------------------------------------------------------- gradient suite

_rng = np.random.default_rng(2024)


def _r(*shape):
    return _rng.normal(size=shape)


def _positive(*shape):
    return _rng.uniform(0.5, 2.0, size=shape)


GRAD_CASES = {
    "add_broadcast": (lambda a, b: a + b, [_r(3, 4), _r(4)]),
    "sub": (lambda a, b: a - b, [_r(2, 5), _r(2, 5)]),
    "mul_broadcast": (lambda a, b: a * b, [_r(4, 3), _r(4, 1)]),
    "exp": (ag.exp, [_r(3, 3)]),
    "sigmoid": (ag.sigmoid, [_r(6)]),
    "silu": (ag.silu, [_r(2, 4)]),
    "softplus": (ag.softplus, [_r(5, 2)]),
    "matmul": (ag.matmul, [_r(3, 4), _r(4, 2)]),
    "matmul_batched": (ag.matmul, [_r(2, 3, 4), _r(2, 4, 3)]),
    "sum_axis": (lambda x: ag.tsum(x, axis=1), [_r(3, 5)]),
    "mean": (lambda x: ag.mean(x, axis=0), [_r(4, 2)]),
    "reshape": (lambda x: ag.reshape(x, (6, 2)), [_r(3, 4)]),
    "transpose": (lambda x: ag.transpose(x, (1, 2, 0)), [_r(2, 3, 4)]),
    "getitem_slice": (lambda x: x[1:3], [_r(5, 2)]),
    "getitem_repeat": (lambda x: x[[0, 2, 0]], [_r(4, 3)]),
    "concat": (lambda a, b: ag.concat([a, b], axis=0), [_r(2, 3), _r(4, 3)]),
    "stack": (lambda a, b: ag.stack([a, b]), [_r(3), _r(3)]),
    "softmax": (ag.softmax_lastaxis, [_r(3, 5)]),
    "masked_softmax": (lambda x: ag.masked_softmax(x, np.tril(np.ones((4, 4), bool))), [_r(4, 4)]),
    "rmsnorm": (ag.rmsnorm, [_r(3, 6), _positive(6)]),
    "conv1d": (ag.causal_depthwise_conv1d, [_r(7, 3), _r(3, 3)]),
    "embedding": (lambda t: ag.embedding_lookup(t, [1, 0, 1, 3]), [_r(4, 3)]),
    "cross_entropy": (lambda z: ag.cross_entropy(z, [1, 0, 2]), [_r(3, 4)]),
    "rope": (lambda x: ag.rope(x, [0, 3, 7], base=100.0), [_r(3, 8)]),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_soundness(name):
    fn, inputs = GRAD_CASES[name]
    assert gradcheck(fn, *inputs) < TOL
