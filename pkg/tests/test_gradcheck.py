import numpy as np
import pytest

from dualinject import gradcheck
from dualinject import tensor as T
from dualinject.tensor import ContractError, Tensor

REQUIRED = ("ssim", "attend", "total_generator_loss", "dist_loss", "adversarial", "conv2d", "softmax",
            "layer_norm", "inject_self_attention", "decoupled_cross_attention", "masked_decoupled_cross_attention",
            "forward_perturb", "lora_linear", "matmul")


def test_registry_covers_required_components():
    assert set(REQUIRED) <= set(gradcheck.REGISTRY)


@pytest.mark.parametrize("name", ["ssim", "attend", "total_generator_loss"])
def test_named_examples_pass(name):
    r = gradcheck.run(name)
    assert r.passed, r.line()
    assert r.line().startswith("PASS") and name in r.line()


def test_unknown_component():
    with pytest.raises(KeyError):
        gradcheck.run("no_such_component")


def test_check_requires_float64():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with pytest.raises(ContractError):
        gradcheck.check(lambda: T.sum_(x * x), [x], np.random.default_rng(0))


def test_check_detects_a_wrong_gradient():
    x = Tensor(np.random.default_rng(0).standard_normal(5), requires_grad=True)

    def broken():
        # value is sum(x^3) but one factor is detached: tape says 2x^2, truth is 3x^2
        y = x * x
        scale = Tensor(x.data.copy())
        return T.sum_(y * scale)

    err, n = gradcheck.check(broken, [x], np.random.default_rng(1))
    assert n == 5
    assert err > 0.1
    assert not gradcheck.GradReport("broken", err, n).passed


def test_check_accepts_a_correct_gradient():
    x = Tensor(np.random.default_rng(2).standard_normal((4, 4)), requires_grad=True)
    err, n = gradcheck.check(lambda: T.sum_(T.tanh(x) * x), [x], np.random.default_rng(3))
    assert err < 1e-6 and n == gradcheck.MAX_COORDS


def test_check_restores_inputs():
    data = np.random.default_rng(4).standard_normal(6)
    x = Tensor(data.copy(), requires_grad=True)
    gradcheck.check(lambda: T.sum_(T.exp(x)), [x], np.random.default_rng(5))
    np.testing.assert_array_equal(x.data, data)


def test_constants():
    assert gradcheck.REL_TOL == 1e-4 and gradcheck.STEP == 1e-3
