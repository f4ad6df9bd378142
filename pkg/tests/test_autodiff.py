import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iib_lab import autodiff as ad


def _params_from(arrays):
    return ad.ParameterSet(
        {"encoder": {name: ad.parameter(value, name) for name, value in arrays.items()}}
    )


class TestForward:
    def test_affine_identity(self):
        x = ad.constant([[1.0, 2.0]])
        w = ad.parameter(np.eye(2), "w")
        b = ad.parameter(np.zeros(2), "b")
        np.testing.assert_array_equal(ad.evaluate(ad.affine(x, w, b)), [[1.0, 2.0]])

    def test_relu(self):
        out = ad.relu(ad.constant([-1.0, 0.0, 3.0]))
        np.testing.assert_array_equal(out.value, [0.0, 0.0, 3.0])

    def test_softmax_xent_uniform_logits(self):
        logits = ad.constant(np.zeros((1, 10)))
        loss = ad.softmax_cross_entropy(logits, np.array([3]))
        assert loss.value[0] == pytest.approx(math.log(10.0), abs=1e-12)

    def test_softmax_xent_extreme_logits_stay_finite(self):
        logits = ad.constant([[700.0, -700.0]])
        loss = ad.softmax_cross_entropy(logits, np.array([0]))
        assert loss.value[0] == pytest.approx(0.0, abs=1e-12)

    def test_affine_shape_mismatch_names_both_shapes(self):
        x = ad.constant(np.zeros((2, 3)))
        w = ad.parameter(np.zeros((4, 2)), "w")
        b = ad.parameter(np.zeros(2), "b")
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            ad.affine(x, w, b)

    def test_non_finite_intermediate_names_op(self):
        with pytest.raises(ad.NonFiniteError, match="exp"):
            ad.exp(ad.constant([1000.0]))

    def test_log_of_zero_rejected(self):
        with pytest.raises(ad.NonFiniteError, match="log"):
            ad.log(ad.constant([0.0]))


class TestBackward:
    def test_square(self):
        x = ad.parameter(3.0, "x")
        y = ad.mul(x, x)
        grads = ad.backward(y, _params_from({}))
        ad.backward(y)
        assert float(x.grad) == pytest.approx(6.0, abs=1e-15)

    def test_product_rule(self):
        x = ad.parameter(2.0, "x")
        y = ad.parameter(5.0, "y")
        ad.backward(ad.mul(x, y))
        assert float(x.grad) == pytest.approx(5.0)
        assert float(y.grad) == pytest.approx(2.0)

    def test_root_gradient_is_one(self):
        x = ad.parameter(4.0, "x")
        root = ad.mul(x, x)
        ad.backward(root)
        assert float(root.grad) == 1.0

    def test_non_scalar_root_rejected(self):
        x = ad.parameter([1.0, 2.0], "x")
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(ad.relu(x))

    def test_unreachable_parameter_gets_zero(self):
        params = ad.ParameterSet(
            {
                "encoder": {"used": ad.parameter(2.0, "used")},
                "domain_predictor": {"idle": ad.parameter([1.0, 1.0], "idle")},
            }
        )
        root = ad.mul(params.get("used"), params.get("used"))
        grads = ad.backward(root, params)
        np.testing.assert_array_equal(grads["idle"], [0.0, 0.0])
        assert float(grads["used"]) == pytest.approx(4.0)

    def test_softmax_xent_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(0)
        logits_value = rng.normal(size=(5, 7))
        labels = rng.integers(0, 7, size=5)
        logits = ad.parameter(logits_value, "logits")
        params = ad.ParameterSet({"encoder": {"logits": logits}})
        loss = ad.tensor_mean(ad.softmax_cross_entropy(logits, labels))
        grads = ad.backward(loss, params)

        shifted = np.exp(logits_value - logits_value.max(axis=1, keepdims=True))
        probs = shifted / shifted.sum(axis=1, keepdims=True)
        expected = (probs - np.eye(7)[labels]) / 5.0
        np.testing.assert_allclose(grads["logits"], expected, atol=1e-12)

        def loss_fn(p):
            return ad.tensor_mean(ad.softmax_cross_entropy(p.get("logits"), labels))

        assert ad.finite_difference_check(loss_fn, params, step=1e-6) <= 1e-5

    def test_repeat_backward_is_bit_identical(self):
        rng = np.random.default_rng(3)
        w = ad.parameter(rng.normal(size=(4, 3)), "w")
        b = ad.parameter(rng.normal(size=3), "b")
        params = ad.ParameterSet({"encoder": {"w": w, "b": b}})
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 3, size=6)

        def loss_fn(p):
            return ad.tensor_mean(
                ad.softmax_cross_entropy(ad.affine(ad.constant(x), p.get("w"), p.get("b")), y)
            )

        first = ad.backward(loss_fn(params), params)
        second = ad.backward(loss_fn(params), params)
        assert float(loss_fn(params).value) == float(loss_fn(params).value)
        for name in first:
            np.testing.assert_array_equal(first[name], second[name])

    @given(a=st.floats(-3, 3), b=st.floats(-3, 3))
    @settings(max_examples=50, deadline=None)
    def test_backward_is_linear_in_the_loss(self, a, b):
        rng = np.random.default_rng(11)
        w = ad.parameter(rng.normal(size=(3, 2)), "w")
        bias = ad.parameter(rng.normal(size=2), "bias")
        params = ad.ParameterSet({"encoder": {"w": w, "bias": bias}})
        x = rng.normal(size=(4, 3))

        def l1(p):
            return ad.tensor_mean(ad.relu(ad.affine(ad.constant(x), p.get("w"), p.get("bias"))))

        def l2(p):
            h = ad.affine(ad.constant(x), p.get("w"), p.get("bias"))
            return ad.tensor_sum(ad.mul(h, h))

        g1 = ad.backward(l1(params), params)["w"]
        g2 = ad.backward(l2(params), params)["w"]
        combined = ad.backward(ad.add(ad.scale(l1(params), a), ad.scale(l2(params), b)), params)["w"]
        np.testing.assert_allclose(combined, a * g1 + b * g2, atol=1e-12)


class TestFiniteDifference:
    def test_quadratic_is_exact_to_rounding(self):
        params = _params_from({"x": np.array([0.7, -1.3, 2.0])})

        def loss_fn(p):
            x = p.get("x")
            return ad.tensor_sum(ad.mul(x, x))

        assert ad.finite_difference_check(loss_fn, params, step=1e-6) <= 1e-9

    def test_every_op_against_central_differences(self):
        # one composite loss touching every differentiable op tag, 10 seeds
        for seed in range(10):
            rng = np.random.default_rng(seed)
            params = _params_from(
                {
                    "w": rng.normal(size=(4, 3)) * 0.7,
                    "b": rng.normal(size=3) * 0.2,
                    "v": rng.normal(size=(5, 3)) * 0.4,
                }
            )
            x = rng.normal(size=(5, 4))
            labels = rng.integers(0, 3, size=5)

            def loss_fn(p, x=x, labels=labels):
                h = ad.affine(ad.constant(x), p.get("w"), p.get("b"))
                r = ad.relu(h)
                s = ad.softplus(h)
                e = ad.exp(ad.scale(h, 0.1))
                lg = ad.log(ad.add_scalar(ad.mul(h, h), 1.5))
                ce = ad.softmax_cross_entropy(ad.add(h, p.get("v")), labels)
                pieces = ad.add(ad.add(ad.tensor_mean(r), ad.tensor_sum(ad.mul(s, e)) * 0.01), ad.tensor_mean(lg))
                g = ad.ce_scale_derivative(ad.add(h, p.get("v")), labels)
                return ad.add(ad.add(pieces, ad.tensor_mean(ce)), ad.mul(g, g))

            err = ad.finite_difference_check(loss_fn, params, step=1e-6)
            assert err <= 1e-5, f"seed {seed}: max relative error {err}"

    def test_ce_scale_derivative_matches_hand_derivation(self):
        # single sample, 2 classes, logits (a, -a), label 0:
        # d/dw CE(w * logits) at w=1 equals a * (tanh(a) - 1)
        a = 0.8
        logits = ad.parameter([[a, -a]], "logits")
        node = ad.ce_scale_derivative(logits, np.array([0]))
        assert float(node.value) == pytest.approx(a * (math.tanh(a) - 1.0), abs=1e-12)

    def test_step_validation(self):
        params = _params_from({"x": np.ones(2)})
        with pytest.raises(ValueError):
            ad.finite_difference_check(lambda p: ad.tensor_sum(p.get("x")), params, step=0.1)


class TestParameterSet:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            ad.ParameterSet(
                {
                    "encoder": {"w": ad.parameter(1.0, "w")},
                    "invariant_predictor": {"w": ad.parameter(2.0, "w")},
                }
            )

    def test_unknown_group_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ad.ParameterSet({"mystery": {}})

    def test_roundtrip_values(self):
        params = _params_from({"w": np.arange(6.0).reshape(2, 3)})
        snapshot = params.copy_values()
        params.get("w").value[...] = 0.0
        params.load_values(snapshot)
        np.testing.assert_array_equal(params.get("w").value, np.arange(6.0).reshape(2, 3))
