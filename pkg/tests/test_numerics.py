import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from peft_forge import gradcheck as gc
from peft_forge import numerics as nx
from peft_forge.numerics import DimensionError, GradTape, NonFiniteError, Parameter


@pytest.mark.parametrize("op", sorted(gc.OP_CASES))
def test_op_matches_finite_differences(op):
    res = gc.check_op(op, seed=0, n_shapes=20)
    assert res.passed, res.line()


def test_layer_norm_tolerance_is_looser():
    assert gc.check_op("layer_norm").tol == 1e-4
    assert gc.check_op("matmul", n_shapes=1).tol == 1e-5


def test_every_op_has_a_case():
    ops = {"add", "sub", "mul", "scale", "matmul", "kron", "gelu", "tanh_act", "softmax", "layer_norm",
           "softmax_cross_entropy", "reshape", "transpose", "concat", "narrow", "take", "sum_all"}
    assert ops == set(gc.OP_CASES)


@pytest.mark.parametrize("op", ["matmul", "gelu", "layer_norm", "take"])
def test_sign_flip_fault_is_detected(op):
    with gc.inject_sign_flip(op):
        res = gc.check_op(op, n_shapes=3)
    assert not res.passed
    assert gc.check_op(op, n_shapes=3).passed


def test_empty_tape_gives_zero_gradients():
    p = Parameter("w", np.ones((2, 3)))
    with GradTape() as tape:
        pass
    loss = nx.as_tensor(np.array(1.0))
    grads = tape.gradient(loss, [p])
    assert np.array_equal(grads[p], np.zeros((2, 3)))


def test_frozen_parameter_gets_no_gradient():
    w = Parameter("w", np.ones((2, 2)), trainable=True)
    f = Parameter("f", np.ones((2, 2)), trainable=False)
    with GradTape() as tape:
        loss = nx.sum_all(nx.matmul(w, f))
    grads = tape.gradient(loss)
    assert w in grads and f not in grads
    assert all(p is not f for p, _ in tape.contributions(loss))


def test_no_tape_records_nothing():
    w = Parameter("w", np.ones((2, 2)))
    out = nx.matmul(w, w)
    assert not out.requires_grad


def test_shared_parameter_contributions_sum():
    w = Parameter("w", np.array([[2.0]]))
    with GradTape() as tape:
        loss = nx.sum_all(nx.add(nx.scale(w, 3.0), nx.scale(w, 4.0)))
    contribs = tape.contributions(loss)
    assert len(contribs) == 2
    assert tape.gradient(loss)[w][0, 0] == pytest.approx(7.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_raises():
    with pytest.raises(NonFiniteError):
        nx.scale(np.array([1e308]), 1e10)
    with pytest.raises(NonFiniteError):
        nx.add(np.array([np.nan]), np.array([1.0]))


def test_dimension_errors():
    with pytest.raises(DimensionError):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        nx.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(DimensionError):
        nx.layer_norm(np.ones((2, 3)), np.ones(2), np.zeros(2))
    with pytest.raises(DimensionError):
        nx.reshape(np.ones(6), (4, 2))


def test_cross_entropy_bad_target_and_all_ignored():
    logits = Parameter("l", np.zeros((3, 4)))
    with pytest.raises(IndexError):
        nx.softmax_cross_entropy(logits, [0, 4, 1])
    with GradTape() as tape:
        loss = nx.softmax_cross_entropy(logits, [-100, -100, -100])
    assert float(loss.data) == 0.0
    assert np.array_equal(tape.gradient(loss)[logits], np.zeros((3, 4)))


def test_cross_entropy_uniform_logits():
    loss = nx.softmax_cross_entropy(np.zeros((2, 5)), [1, 3])
    assert float(loss.data) == pytest.approx(np.log(5.0))


def test_kron_matches_numpy(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((4, 1))
    assert np.array_equal(nx.kron(a, b).data, np.kron(a, b))


def test_gelu_known_values():
    out = nx.gelu(np.array([0.0, 1.0, -1.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.8411920, abs=1e-6)
    assert out[2] == pytest.approx(-0.1588080, abs=1e-6)


def test_finite_diff_requires_f64():
    p = Parameter("p", np.ones(2, dtype=np.float32))
    with pytest.raises(ValueError):
        nx.finite_diff_grad(lambda q: nx.sum_all(q), p)


def test_relative_error_is_max_norm():
    assert nx.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert nx.relative_error(np.array([0.0, 4.0]), np.array([1.0, 4.0])) == pytest.approx(0.25)
    assert nx.relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_take_out_of_range():
    with pytest.raises(IndexError):
        nx.take(np.ones((3, 2)), [3], axis=0)


def test_optimizer_replacement_keeps_old_tensors():
    w = Parameter("w", np.ones(2))
    t = w.leaf()
    w.data = w.data * 2
    assert np.array_equal(t.data, np.ones(2))


floats = st.floats(-5, 5, allow_nan=False, width=64)
arrays2d = hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=6), elements=floats)


@given(arrays2d)
@settings(max_examples=50, deadline=None)
def test_softmax_rows_are_distributions(x):
    y = nx.softmax(x, axis=-1).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=-1), 1.0)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, min_side=2, max_side=6), elements=floats))
@settings(max_examples=50, deadline=None)
def test_layer_norm_standardizes(x):
    d = x.shape[-1]
    y = nx.layer_norm(x, np.ones(d), np.zeros(d)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-9)
    var = x.var(axis=-1)
    expected = var / (var + nx.LAYER_NORM_EPS)
    assert np.allclose(y.var(axis=-1), expected, atol=1e-9)


@given(arrays2d, st.integers(0, 1))
@settings(max_examples=50, deadline=None)
def test_narrow_concat_roundtrip(x, axis):
    n = x.shape[axis]
    cut = n // 2
    parts = [nx.narrow(x, axis, 0, cut), nx.narrow(x, axis, cut, n)]
    assert np.array_equal(nx.concat(parts, axis=axis).data, x)


@given(arrays2d)
@settings(max_examples=50, deadline=None)
def test_take_inverse_permutation(x):
    perm = np.random.default_rng(x.shape[0]).permutation(x.shape[0])
    y = nx.take(nx.take(x, perm, axis=0), np.argsort(perm), axis=0)
    assert np.array_equal(y.data, x)


@given(arrays2d)
@settings(max_examples=50, deadline=None)
def test_every_op_output_is_finite(x):
    for out in (nx.gelu(x), nx.tanh_act(x), nx.softmax(x), nx.matmul(x, x.T)):
        assert np.isfinite(out.data).all()
