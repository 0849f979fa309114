import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rseq import numerics as nx
from rseq.errors import DimensionError, NumericFault, UsageError

from conftest import max_abs

SEEDS = range(10)
finite = st.floats(-50, 50, allow_nan=False, width=64)


# -- matmul -----------------------------------------------------------------------

def test_matmul_identity_and_zero():
    a = nx.Tensor([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(nx.matmul(nx.Tensor(np.eye(2)), a).data, a.data)
    assert not nx.matmul(a, nx.zeros((2, 2))).data.any()


def test_matmul_hand_expanded():
    # 1*5+2*6 = 17, 3*5+4*6 = 39
    out = nx.matmul(nx.Tensor([[1, 2], [3, 4]]), nx.Tensor([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.zeros((2, 3)), nx.zeros((2, 3)))


def test_matmul_associative(f64):
    for seed in SEEDS:
        rng = nx.Rng(seed)
        a, b, c = (nx.Tensor(rng.normal(s)) for s in [(3, 4), (4, 5), (5, 2)])
        left = nx.matmul(nx.matmul(a, b), c).data
        right = nx.matmul(a, nx.matmul(b, c)).data
        assert np.max(np.abs(left - right) / np.maximum(np.abs(left), 1e-12)) < 1e-5


# -- softmax ----------------------------------------------------------------------

def test_softmax_trivial_rows():
    out = nx.softmax_rows(nx.Tensor([[0.0, 0.0, 0.0]]))
    assert max_abs(out, [[1 / 3] * 3]) < 1e-7
    assert nx.softmax_rows(nx.Tensor([[42.0]])).data.tolist() == [[1.0]]


def test_softmax_two_entries(f64):
    # mpmath at 30 digits: e/(e+e^2), e^2/(e+e^2)
    out = nx.softmax_rows(nx.Tensor([[1.0, 2.0]]))
    assert max_abs(out, [[0.26894142136999512, 0.73105857863000488]]) < 1e-15


def test_softmax_empty_row_rejected():
    with pytest.raises(DimensionError):
        nx.softmax_rows(nx.zeros((2, 0)))


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite),
       st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(x, c):
    with nx.precision("f64"):
        p = nx.softmax_rows(nx.Tensor(x)).data
        q = nx.softmax_rows(nx.Tensor(x + c)).data
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-6
    assert np.max(np.abs(p - q)) < 1e-6


def test_causal_softmax_ignores_masked_scores():
    rng = nx.Rng(3)
    s = rng.normal((4, 4))
    s2 = s.copy()
    s2[np.triu_indices(4, 1)] = 1e30
    a = nx.softmax(nx.Tensor(s), causal=True).data
    b = nx.softmax(nx.Tensor(s2), causal=True).data
    assert np.array_equal(a, b)
    assert not a[np.triu_indices(4, 1)].any()


# -- relu / layer_norm ------------------------------------------------------------

def test_relu_definition():
    assert nx.relu(nx.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert not nx.relu(nx.Tensor(-np.arange(1.0, 6.0))).data.any()


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=3, max_side=5), elements=finite))
def test_relu_pair_is_abs(x):
    with nx.precision("f64"):
        out = nx.relu(nx.Tensor(x)).data + nx.relu(nx.Tensor(-x)).data
    assert np.array_equal(out, np.abs(x))


def test_layer_norm_constant_row_is_zero():
    out = nx.layer_norm(nx.Tensor(np.full((2, 5), 3.7)), nx.ones(5), nx.zeros(5))
    assert np.all(np.isfinite(out.data)) and max_abs(out, 0) < 1e-6


def test_layer_norm_fixed_point():
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    assert max_abs(nx.layer_norm(nx.Tensor(row), nx.ones(4), nx.zeros(4)), row) < 1e-3


def test_layer_norm_two_pass_oracle(f64):
    rng = nx.Rng(11)
    for _ in range(10):
        x = rng.normal((3, 7), 4.0)
        gain, bias = rng.normal(7), rng.normal(7)
        expected = np.empty_like(x)
        for t, row in enumerate(x):
            mu = sum(row) / len(row)
            var = sum((v - mu) ** 2 for v in row) / len(row)
            expected[t] = [gain[j] * (row[j] - mu) / math.sqrt(var + 1e-5) + bias[j] for j in range(7)]
        out = nx.layer_norm(nx.Tensor(x), nx.Tensor(gain), nx.Tensor(bias), 1e-5)
        assert max_abs(out, expected) < 1e-6


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)),
                  elements=st.floats(-1e3, 1e3)))
def test_layer_norm_moments(x):
    x = x + np.arange(x.shape[1])  # keeps var(a_t) well above eps
    with nx.precision("f64"):
        out = nx.layer_norm(nx.Tensor(x), nx.ones(x.shape[1]), nx.zeros(x.shape[1])).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-6
    assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-3


# -- backward / finite differences ---------------------------------------------

def test_backward_linear_and_quadratic():
    x = nx.parameter(np.array([1.0, -2.0, 3.0]))
    nx.backward(nx.tsum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.grad = None
    nx.backward(nx.tsum(x * x))
    assert np.array_equal(x.grad, 2 * x.data)
    assert nx.tape_size() == 0


def test_backward_rejects_non_scalar():
    x = nx.parameter(np.ones(3))
    with pytest.raises(UsageError):
        nx.backward(x * 2.0)


def test_backward_rejects_disconnected_loss():
    with pytest.raises(UsageError):
        nx.backward(nx.Tensor(1.0))


def test_gradients_accumulate_over_reuse():
    x = nx.parameter(np.array([2.0]))
    nx.backward(nx.tsum(x * 3.0 + x * x))
    assert x.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    x = nx.parameter(np.ones(3))
    with nx.no_grad():
        y = nx.tanh(x) * 2.0
    assert nx.tape_size() == 0 and not y.requires_grad


def test_finite_diff_examples(f64):
    x = nx.Tensor(nx.Rng(0).normal((3, 2)))
    assert max_abs(nx.finite_diff_grad(lambda t: nx.tsum(t), x), 1.0) < 1e-8
    assert max_abs(nx.finite_diff_grad(lambda t: 4.2, x), 0.0) < 1e-8
    three = nx.Tensor([3.0])
    assert abs(nx.finite_diff_grad(lambda t: nx.tsum(t * t), three, 1e-5).data[0] - 6.0) < 1e-6


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        nx.finite_diff_grad(lambda t: nx.tsum(t), nx.ones(2), 0.0)


def test_non_finite_result_raises_with_op_kind():
    with pytest.raises(NumericFault) as exc:
        nx.log(nx.Tensor([0.0, 1.0]))
    assert exc.value.op == "log"
    with pytest.raises(NumericFault) as exc:
        nx.exp(nx.Tensor([1e4]))
    assert exc.value.op == "exp"


def test_precision_switch():
    assert nx.ones(2).dtype == np.float32
    with nx.precision("f64"):
        assert nx.ones(2).dtype == np.float64
        assert nx.precision_name() == "f64"
    assert nx.ones(2).dtype == np.float32


# -- per-op gradient checks ---------------------------------------------------------

def _pos(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


# name -> (input shapes, builder(rng) -> function of the input tensors, optional input sampler)
OPS = {
    "add": ([(3, 4), (4,)], lambda r: lambda a, b: a + b, None),
    "sub": ([(3, 4), (3, 1)], lambda r: lambda a, b: a - b, None),
    "mul": ([(3, 4), (3, 4)], lambda r: lambda a, b: a * b, None),
    "div": ([(3, 4), (4,)], lambda r: lambda a, b: a / b, _pos),
    "neg": ([(5,)], lambda r: lambda a: -a, None),
    "matmul": ([(3, 4), (4, 2)], lambda r: nx.matmul, None),
    "matmul_batched": ([(2, 3, 4), (4, 5)], lambda r: nx.matmul, None),
    "matmul_both_batched": ([(2, 3, 4), (2, 4, 5)], lambda r: nx.matmul, None),
    "sum_axis": ([(3, 4)], lambda r: lambda a: nx.tsum(a, axis=0), None),
    "mean": ([(3, 4)], lambda r: lambda a: nx.mean(a, axis=-1, keepdims=True), None),
    "reshape": ([(3, 4)], lambda r: lambda a: a.reshape(2, 6), None),
    "transpose": ([(2, 3, 4)], lambda r: lambda a: a.transpose(2, 0, 1), None),
    "getitem_slice": ([(4, 5)], lambda r: lambda a: a[1:3, ::2], None),
    "getitem_fancy": ([(4, 3)], lambda r: lambda a: a[np.array([0, 2, 2, 3])], None),
    "concat": ([(2, 3), (4, 3)], lambda r: lambda a, b: nx.concat([a, b], axis=0), None),
    "stack": ([(2, 3), (2, 3)], lambda r: lambda a, b: nx.stack([a, b], axis=1), None),
    "pad_rows": ([(2, 3, 4)], lambda r: lambda a: nx.pad_rows(a, 2), None),
    "exp": ([(3, 4)], lambda r: nx.exp, None),
    "log": ([(3, 4)], lambda r: nx.log, _pos),
    "tanh": ([(3, 4)], lambda r: nx.tanh, None),
    "sigmoid": ([(3, 4)], lambda r: nx.sigmoid, None),
    "relu": ([(3, 4)], lambda r: nx.relu, None),
    "softmax": ([(3, 5)], lambda r: nx.softmax_rows, None),
    "softmax_causal": ([(2, 4, 4)], lambda r: lambda a: nx.softmax(a, causal=True), None),
    "log_softmax": ([(3, 5)], lambda r: nx.log_softmax, None),
    "layer_norm": ([(3, 6), (6,), (6,)], lambda r: nx.layer_norm, None),
    "dropout": ([(4, 5)], lambda r: lambda a: nx.dropout(a, 0.3, nx.Rng(r)), None),
    "embedding": ([(6, 3)], lambda r: lambda t: nx.embedding(t, np.array([[0, 5, 2], [2, 2, 1]])), None),
    "cross_entropy": ([(2, 3, 5)], lambda r: lambda z: nx.cross_entropy(z, np.array([[0, 4, -1], [2, 2, 1]])),
                      None),
}


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradient_matches_finite_differences(op, seed, f64):
    shapes, build, sampler = OPS[op]
    rng = nx.Rng(seed)
    inputs = [nx.parameter(sampler(rng, s) if sampler else rng.normal(s)) for s in shapes]
    fn = build(seed)
    weights = rng.normal(fn(*inputs).shape)  # random projection makes every output entry count

    def loss(*_):
        out = fn(*inputs)
        return nx.tsum(out * weights) if out.ndim else out

    nx.backward(loss())
    for x in inputs:
        numeric = nx.finite_diff_grad(lambda _: loss(), x, 1e-5)
        assert nx.relative_error(x.grad, numeric.data) < 1e-4, op


# -- Rng --------------------------------------------------------------------------

def test_rng_same_seed_same_sequence():
    a, b = nx.Rng(1234), nx.Rng(1234)
    for _ in range(3):
        assert np.array_equal(a.normal((5,)), b.normal((5,)))
        assert np.array_equal(a.uniform(-1, 1, (2, 2)), b.uniform(-1, 1, (2, 2)))
        assert np.array_equal(a.integers(0, 9, 6), b.integers(0, 9, 6))
        assert np.array_equal(a.permutation(7), b.permutation(7))


def test_rng_state_round_trip():
    a = nx.Rng(5)
    a.normal(10)
    b = nx.Rng.from_state(a.get_state())
    assert np.array_equal(a.normal(8), b.normal(8))


def test_rng_spawn_streams_are_independent_and_stable():
    base = nx.Rng(9)
    assert np.array_equal(base.spawn(3).normal(4), nx.Rng(9).spawn(3).normal(4))
    assert not np.array_equal(base.spawn(3).normal(4), base.spawn(4).normal(4))
