import numpy as np
import pytest

from peft_forge import gradcheck as gc
from peft_forge import numerics as nx


def test_every_op_has_a_case():
    assert set(gc.OP_CASES) >= {"matmul", "kron", "gelu", "softmax", "layer_norm", "softmax_cross_entropy", "take"}


@pytest.mark.parametrize("name", sorted(gc.OP_CASES))
def test_op_passes(name):
    r = gc.check_op(name, seed=3, n_shapes=5)
    assert r.passed, r.line()


def test_layer_norm_tolerance_is_looser():
    assert gc.check_op("layer_norm", n_shapes=1).tol == 1e-4
    assert gc.check_op("add", n_shapes=1).tol == 1e-5


@pytest.mark.parametrize("name", ["gelu", "matmul", "layer_norm"])
def test_sign_flip_is_caught(name):
    with gc.inject_sign_flip(name):
        r = gc.check_op(name, n_shapes=3)
    assert not r.passed
    assert r.line().startswith("FAIL")
    # the original op is restored afterwards
    assert gc.check_op(name, n_shapes=3).passed


def test_sign_flip_outside_tape_is_harmless():
    x = np.arange(6.0).reshape(2, 3)
    with gc.inject_sign_flip("gelu"):
        out = nx.gelu(x)
    assert np.allclose(out.data, nx.gelu(x).data)


@pytest.mark.parametrize("name", gc.REGIMES)
def test_regime_checks(name):
    results = gc.check_regime(name)
    assert all(r.passed for r in results), [r.line() for r in results]
    assert {r.name for r in results} >= {f"regime/{name}/finite_difference", f"regime/{name}/reach"}


def test_compacter_regime_includes_phm_agreement():
    names = [r.name for r in gc.run("compacter")]
    assert "regime/compacter/phm_factored_vs_materialized" in names


def test_unknown_regime():
    with pytest.raises(KeyError):
        gc.check_regime("dropout")


def test_nan_error_fails():
    assert not gc.CheckResult("x", float("nan"), 1.0).passed


def test_regime_check_catches_fault():
    with gc.inject_sign_flip("gelu"):
        results = gc.check_regime("adapter")
    assert not next(r for r in results if r.name.endswith("finite_difference")).passed
