import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from icsinet.errors import ContractError, ShapeError
from icsinet.tensor import (
    Tensor,
    add,
    backward,
    channel_slice,
    exp,
    grad_check,
    log,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    sqrt,
    sub,
    sum,
    transpose,
    zero_grads,
    zeros_like,
)


def leaf(values, dtype=np.float64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class TestAdd:
    def test_values(self):
        np.testing.assert_array_equal(add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data, [4.0, 6.0])

    def test_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(add(x, zeros_like(x)).data, x.data)

    def test_grad_is_ones(self, rng):
        a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
        backward(sum(a + b))
        np.testing.assert_array_equal(a.grad, np.ones((2, 3)))
        np.testing.assert_array_equal(b.grad, np.ones((2, 3)))

    def test_shape_mismatch_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
            add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))

    def test_scalar_broadcast(self):
        x = leaf([1.0, 2.0, 3.0])
        s = leaf(2.0)
        backward(sum(mul(x, s)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])
        assert s.grad == pytest.approx(6.0)


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self, rng):
        assert not relu(Tensor(-rng.random(10) - 0.1)).data.any()

    def test_subgradient_zero_at_kink(self):
        x = leaf([0.0, 1.0])
        backward(sum(relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_gradcheck(self, rng):
        x = Tensor(rng.uniform(-2, 2, (4, 4)))
        assert grad_check(lambda t: sum(relu(t)), x, exclude=np.abs(x.data) < 1e-3) < 1e-4


class TestBackward:
    def test_square(self):
        x = leaf([1.0, 2.0, 3.0])
        backward(sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_fan_out(self):
        x = leaf([1.0, -2.0, 3.0, 0.5])
        backward(sum(x + x))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0, 2.0])

    def test_non_scalar_root(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(ContractError):
            backward(x * x)

    def test_accumulates_across_calls(self):
        x = leaf([1.0, 2.0])
        backward(sum(x * x))
        backward(sum(x * x))
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        zero_grads([x])
        assert x.grad is None or not x.grad.any()

    def test_reverse_recording_order(self):
        x = leaf([1.0])
        a = x * 2.0
        b = exp(a)
        c = a + b
        assert x.node_id < a.node_id < b.node_id < c.node_id

    def test_no_grad_records_nothing(self):
        x = leaf([1.0, 2.0])
        with no_grad():
            y = sum(x * x)
        assert not y.requires_grad

    def test_micro_model_every_parameter(self):
        from icsinet.losses import LossConfig, total_loss
        from icsinet.model import ModelConfig, build_model

        rng = np.random.default_rng(5)
        model = build_model(ModelConfig(input_size=8, depth=1, channels=[2, 3], seed=3), dtype=np.float64)
        # zero-initialized biases put every all-zero patch exactly on a relu kink
        for name, p in model.named_parameters().items():
            if name.endswith("bias"):
                p.data[:] = rng.normal(0, 0.1, p.shape)
        x = Tensor(rng.random((2, 1, 8, 8)))
        masks = (rng.random((2, 2, 8, 8)) > 0.5).astype(np.float64)
        tips = rng.uniform(-0.7, 0.7, (2, 2))

        def f(_):
            return total_loss(model(x, training=True), masks, tips, LossConfig())

        worst = max(grad_check(f, p) for p in model.parameters())
        assert worst < 1e-4


class TestGradCheck:
    def test_square(self, rng):
        assert grad_check(lambda t: sum(t * t), Tensor(rng.normal(size=(5,)))) < 1e-6

    def test_sigmoid(self, rng):
        assert grad_check(lambda t: sum(sigmoid(t)), Tensor(rng.normal(size=(6,)))) < 1e-5

    def test_constant(self, rng):
        assert grad_check(lambda t: Tensor(3.0), Tensor(rng.normal(size=(3,)))) == 0.0

    def test_non_scalar(self, rng):
        with pytest.raises(ContractError):
            grad_check(lambda t: t * 2.0, Tensor(rng.normal(size=(3,))))


@pytest.mark.parametrize(
    "fn,low",
    [
        (lambda t: sum(exp(t)), -2),
        (lambda t: sum(log(t)), 0.5),
        (lambda t: sum(sqrt(t)), 0.5),
        (lambda t: sum(sigmoid(t)), -2),
        (lambda t: sum(power(t, 3.0)), -2),
        (lambda t: mean(t * t), -2),
        (lambda t: sum(sum(t, axis=0) * Tensor(np.arange(1.0, 4.0))), -2),
        (lambda t: sum(mean(t, axis=0, keepdims=True) * Tensor(np.arange(3.0).reshape(1, 3))), -2),
        (lambda t: sum(reshape(t, (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4))), -2),
        (lambda t: sum(transpose(t) * Tensor(np.arange(12.0).reshape(3, 4))), -2),
        (lambda t: sum(sub(t, t * t) / (t * t + 1.0)), -2),
    ],
)
def test_elementwise_gradcheck(rng, fn, low):
    x = Tensor(rng.uniform(low, 2, (4, 3)))
    assert grad_check(fn, x) < 1e-4


def test_channel_slice_gradcheck(rng):
    x = Tensor(rng.normal(size=(2, 5, 2, 2)))
    r = Tensor(rng.normal(size=(2, 2, 2, 2)))
    assert grad_check(lambda t: sum(channel_slice(t, 1, 3) * r), x) < 1e-4


finite = st.floats(-100, 100, allow_nan=False, width=32)


class TestAlgebraProperties:
    @given(arrays(np.float32, (3, 4), elements=finite), arrays(np.float32, (3, 4), elements=finite))
    def test_commutative(self, a, b):
        ta, tb = Tensor(a), Tensor(b)
        np.testing.assert_array_equal(add(ta, tb).data, add(tb, ta).data)
        np.testing.assert_array_equal(mul(ta, tb).data, mul(tb, ta).data)

    @given(
        arrays(np.float32, 5, elements=st.floats(-1, 1, width=32)),
        arrays(np.float32, 5, elements=st.floats(-1, 1, width=32)),
        arrays(np.float32, 5, elements=st.floats(-1, 1, width=32)),
    )
    def test_associative_add(self, a, b, c):
        ta, tb, tc = Tensor(a), Tensor(b), Tensor(c)
        np.testing.assert_allclose(add(add(ta, tb), tc).data, add(ta, add(tb, tc)).data, atol=1e-6)

    @settings(max_examples=25)
    @given(st.integers(1, 8), arrays(np.float64, 4, elements=st.floats(-2, 2)))
    def test_fan_out_scales_gradient(self, n, x0):
        x = leaf(x0)
        total = x
        for _ in range(n - 1):
            total = total + x
        backward(sum(total))
        np.testing.assert_array_equal(x.grad, np.full(4, float(n)))
