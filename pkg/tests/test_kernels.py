"""Kernel backends: math correctness and python/compiled agreement."""

import math

import numpy as np
import pytest

from levelwise import kernels as K
from levelwise.kernels import reference as R


@pytest.fixture()
def restore_backend():
    previous = K.backend_name()
    yield
    K.use_backend(previous)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


class TestBackendSelection:
    def test_both_backends_available(self):
        """The compiled extension builds in this environment."""
        assert K.available_backends() == ["python", "compiled"]

    def test_switching_rebinds_functions(self, restore_backend):
        K.use_backend("python")
        assert K.backend_name() == "python"
        assert K.sigmoid_fwd is R.sigmoid_fwd
        K.use_backend("compiled")
        assert K.backend_name() == "compiled"
        assert K.sigmoid_fwd is not R.sigmoid_fwd

    def test_unknown_backend_rejected(self):
        with pytest.raises(ValueError, match="unknown kernel backend"):
            K.use_backend("cuda")


class TestSigmoid:
    def test_zero_maps_to_half(self):
        assert float(K.sigmoid_fwd(_c([0.0]))[0]) == 0.5

    def test_extremes_finite(self):
        y = K.sigmoid_fwd(_c([-1e4, 1e4]))
        assert np.all(np.isfinite(y))
        assert 0.0 <= y[0] < 1e-30
        assert y[1] == 1.0 or 1.0 - y[1] < 1e-30

    def test_backward_matches_identity(self, rng):
        """d sigmoid/dx = y(1-y), checked against the closed form."""
        x = _c(rng.normal(size=64))
        y = K.sigmoid_fwd(x)
        dy = _c(rng.normal(size=64))
        assert np.allclose(K.sigmoid_bwd(y, dy), y * (1 - y) * dy, atol=1e-15)


class TestGelu:
    def test_zero(self):
        assert float(K.gelu_fwd(_c([0.0]))[0]) == 0.0

    def test_matches_tanh_formula(self, rng):
        x = rng.normal(size=128) * 3
        got = K.gelu_fwd(_c(x))
        expect = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
        assert np.allclose(got, expect, atol=1e-12)

    def test_large_positive_is_identity_like(self):
        assert abs(float(K.gelu_fwd(_c([6.0]))[0]) - 6.0) < 1e-6


class TestSoftmax:
    def test_uniform_on_identical_logits(self):
        for k in (1, 2, 5, 33):
            y = K.softmax_fwd(_c(np.full((3, k), 1.7)))
            assert np.allclose(y, 1.0 / k, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        x = _c(rng.normal(size=(40, 17)) * 4)
        y = K.softmax_fwd(x)
        assert np.abs(y.sum(axis=-1) - 1.0).max() < 1e-9
        assert np.all(y > 0) and np.all(y < 1)

    def test_max_subtraction_handles_huge_logits(self):
        y = K.softmax_fwd(_c([[1e6, 1e6 - 1.0]]))
        assert np.all(np.isfinite(y))
        assert abs(y.sum() - 1.0) < 1e-12


class TestLayerNorm:
    def test_normalizes_rows(self, rng):
        x = _c(rng.normal(size=(9, 32)) * 5 + 3)
        gain, bias = _c(np.ones(32)), _c(np.zeros(32))
        y, xhat, inv_std = K.layernorm_fwd(x, gain, bias, 1e-12)
        assert np.abs(y.mean(axis=-1)).max() < 1e-7
        assert np.abs(y.var(axis=-1) - 1.0).max() < 1e-5
        assert np.allclose(y, xhat)

    def test_gain_bias_applied(self, rng):
        x = _c(rng.normal(size=(4, 8)))
        gain, bias = _c(np.full(8, 2.0)), _c(np.full(8, -1.0))
        y, xhat, _ = K.layernorm_fwd(x, gain, bias, 1e-12)
        assert np.allclose(y, 2.0 * xhat - 1.0)


class TestBce:
    def test_half_probabilities_give_ln2(self, rng):
        p = _c(np.full((5, 7), 0.5))
        t = _c(rng.integers(0, 2, size=(5, 7)).astype(float))
        assert abs(K.bce_fwd(p, t, 1e-7) - math.log(2)) < 1e-9

    def test_perfect_prediction_near_zero(self):
        eps = 1e-7
        p = _c([eps, 1 - eps])
        t = _c([0.0, 1.0])
        assert K.bce_fwd(p, t, eps) <= 1e-6

    def test_clamping_keeps_loss_finite(self):
        p = _c([0.0, 1.0])
        t = _c([1.0, 0.0])
        assert np.isfinite(K.bce_fwd(p, t, 1e-7))

    def test_matches_elementwise_loop(self, rng):
        """Random 2x3 case against a scalar-by-scalar recomputation."""
        p = _c(rng.uniform(0.01, 0.99, size=(2, 3)))
        t = _c(rng.integers(0, 2, size=(2, 3)).astype(float))
        total = 0.0
        for i in range(2):
            for j in range(3):
                total += -(
                    t[i, j] * math.log(p[i, j])
                    + (1 - t[i, j]) * math.log(1 - p[i, j])
                )
        assert abs(K.bce_fwd(p, t, 1e-7) - total / 6) < 1e-12


class TestAdamStep:
    def _state(self, shape):
        return (np.zeros(shape), np.zeros(shape))

    def test_zero_gradient_leaves_value(self):
        value = _c([1.0, -2.0, 3.0])
        m, v = self._state(3)
        K.adam_step(value, _c(np.zeros(3)), m, v, 0.1, 0.9, 0.999, 1e-8, 0.1, 0.001)
        assert np.array_equal(value, [1.0, -2.0, 3.0])

    def test_first_step_magnitude_close_to_lr(self):
        """With bias correction the first update is ~lr for any grad scale."""
        for g in (1e-4, 1.0, 1e4):
            value = _c([0.0])
            m, v = self._state(1)
            c1 = 1 - 0.9**1
            c2 = 1 - 0.999**1
            K.adam_step(value, _c([g]), m, v, 0.01, 0.9, 0.999, 1e-8, c1, c2)
            assert abs(abs(float(value[0])) - 0.01) < 1e-5

    def test_descends_against_gradient_sign(self):
        value = _c([0.0, 0.0])
        m, v = self._state(2)
        c1, c2 = 1 - 0.9, 1 - 0.999
        K.adam_step(value, _c([3.0, -3.0]), m, v, 0.5, 0.9, 0.999, 1e-8, c1, c2)
        assert value[0] < 0 < value[1]


class TestBackendAgreement:
    """Every kernel gives the same numbers from both implementations."""

    def test_elementwise_and_rowwise_kernels(self, restore_backend, rng):
        for trial in range(20):
            x = _c(rng.normal(size=(6, 11)) * (1 + trial))
            dy = _c(rng.normal(size=(6, 11)))
            gain = _c(rng.normal(size=11))
            bias = _c(rng.normal(size=11))
            p = _c(rng.uniform(0, 1, size=(6, 11)))
            t = _c(rng.integers(0, 2, size=(6, 11)).astype(float))

            K.use_backend("python")
            a = {
                "sig": K.sigmoid_fwd(x),
                "sigb": K.sigmoid_bwd(K.sigmoid_fwd(x), dy),
                "gelu": K.gelu_fwd(x),
                "gelub": K.gelu_bwd(x, dy),
                "soft": K.softmax_fwd(x),
                "softb": K.softmax_bwd(K.softmax_fwd(x), dy),
                "ln": K.layernorm_fwd(x, gain, bias, 1e-12),
                "bce": K.bce_fwd(p, t, 1e-7),
                "bceb": K.bce_bwd(p, t, 1e-7, 0.25),
            }
            a["lnb"] = K.layernorm_bwd(a["ln"][1], a["ln"][2], gain, dy)

            K.use_backend("compiled")
            b = {
                "sig": K.sigmoid_fwd(x),
                "sigb": K.sigmoid_bwd(K.sigmoid_fwd(x), dy),
                "gelu": K.gelu_fwd(x),
                "gelub": K.gelu_bwd(x, dy),
                "soft": K.softmax_fwd(x),
                "softb": K.softmax_bwd(K.softmax_fwd(x), dy),
                "ln": K.layernorm_fwd(x, gain, bias, 1e-12),
                "bce": K.bce_fwd(p, t, 1e-7),
                "bceb": K.bce_bwd(p, t, 1e-7, 0.25),
            }
            b["lnb"] = K.layernorm_bwd(b["ln"][1], b["ln"][2], gain, dy)

            for key in a:
                pair = zip(a[key], b[key]) if isinstance(a[key], tuple) else [
                    (a[key], b[key])
                ]
                for left, right in pair:
                    assert np.allclose(left, right, rtol=1e-12, atol=1e-12), key

    def test_adam_agreement(self, restore_backend, rng):
        value = _c(rng.normal(size=64))
        grad = _c(rng.normal(size=64))
        state = {
            name: (value.copy(), np.zeros(64), np.zeros(64))
            for name in ("python", "compiled")
        }
        for step in range(1, 6):
            c1 = 1 - 0.9**step
            c2 = 1 - 0.999**step
            for name in ("python", "compiled"):
                K.use_backend(name)
                val, m, v = state[name]
                K.adam_step(val, grad, m, v, 1e-3, 0.9, 0.999, 1e-8, c1, c2)
        for left, right in zip(state["python"], state["compiled"]):
            assert np.allclose(left, right, rtol=1e-13, atol=1e-15)
