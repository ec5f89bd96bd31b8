import numpy as np
import pytest

from mucald.exceptions import DataError, ShapeMismatchError, StateError
from mucald.nn import (Adam, AvgPool2, Conv2d, GlobalAvgPool, InstanceNorm2d,
                       Linear, ReLU, Sequential, Sigmoid, SoftmaxChannel,
                       Tensor, Upsample2, activation, cross_entropy_logits,
                       flatten_tensors, grad_check, grad_check_layer, load_flat,
                       load_tensors, parse_tensors, dump_tensors, save_tensors)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestLinear:
    def test_identity_weights(self, rng):
        layer = Linear(2, 2, rng)
        layer.weights.data[...] = np.eye(2)
        layer.bias.data[...] = 0.0
        out = layer.forward(np.array([[1.0, 2.0]]))
        assert np.array_equal(out, [[1.0, 2.0]])

    def test_hand_matrix_multiply(self, rng):
        layer = Linear(2, 2, rng)
        layer.weights.data[...] = [[2.0, 0.0], [0.0, 3.0]]
        layer.bias.data[...] = [1.0, 1.0]
        out = layer.forward(np.array([[1.0, 1.0]]))
        assert np.allclose(out, [[3.0, 4.0]])

    def test_shape_contract(self, rng):
        layer = Linear(3, 5, rng)
        assert layer.forward(rng.normal(size=(4, 3))).shape == (4, 5)

    def test_shape_mismatch_names_both_shapes(self, rng):
        layer = Linear(3, 5, rng)
        with pytest.raises(ShapeMismatchError, match=r"\(4, 2\).*\(3, 5\)"):
            layer.forward(np.zeros((4, 2)))

    def test_zero_upstream_gives_zero_grads(self, rng):
        layer = Linear(3, 4, rng)
        layer.forward(rng.normal(size=(2, 3)))
        dx = layer.backward(np.zeros((2, 4)))
        assert np.array_equal(dx, np.zeros((2, 3)))
        assert np.array_equal(layer.weights.grad, np.zeros((3, 4)))

    def test_scalar_chain_rule(self, rng):
        # 1x1 case: x=2, W=3, upstream=1 -> dW=2, dx=3
        layer = Linear(1, 1, rng)
        layer.weights.data[...] = 3.0
        layer.bias.data[...] = 0.0
        layer.forward(np.array([[2.0]]))
        dx = layer.backward(np.ones((1, 1)))
        assert layer.weights.grad[0, 0] == 2.0
        assert dx[0, 0] == 3.0

    def test_backward_before_forward(self, rng):
        layer = Linear(2, 2, rng)
        with pytest.raises(StateError):
            layer.backward(np.zeros((1, 2)))

    def test_gradient_vs_finite_differences(self, rng):
        err = grad_check_layer(Linear(4, 6, rng), rng.uniform(-1.5, 1.5, (3, 4)))
        assert err < 1e-7


class TestConv2d:
    def test_identity_center_kernel(self, rng):
        conv = Conv2d(1, 1, rng)
        conv.weights.data[...] = 0.0
        conv.weights.data[0, 0, 1, 1] = 1.0
        conv.bias.data[...] = 0.0
        x = rng.uniform(size=(1, 1, 5, 5))
        assert np.allclose(conv.forward(x), x)

    def test_hand_convolution_all_ones(self, rng):
        conv = Conv2d(1, 1, rng)
        conv.weights.data[...] = 1.0
        conv.bias.data[...] = 0.0
        out = conv.forward(np.ones((1, 1, 3, 3)))
        assert out[0, 0, 1, 1] == 9.0
        assert out[0, 0, 0, 0] == 4.0

    def test_spatial_size_preserved(self, rng):
        conv = Conv2d(3, 7, rng)
        assert conv.forward(rng.normal(size=(2, 3, 8, 8))).shape == (2, 7, 8, 8)

    def test_channel_mismatch(self, rng):
        conv = Conv2d(3, 7, rng)
        with pytest.raises(ShapeMismatchError):
            conv.forward(np.zeros((2, 4, 8, 8)))

    def test_even_kernel_rejected(self, rng):
        from mucald.exceptions import ConfigError
        with pytest.raises(ConfigError):
            Conv2d(1, 1, rng, kernel=2)

    def test_gradient_vs_finite_differences(self, rng):
        err = grad_check_layer(Conv2d(2, 3, rng), rng.uniform(-1.5, 1.5, (2, 2, 6, 6)),
                               eps=1e-6)
        assert err < 1e-6

    def test_no_bias_variant(self, rng):
        conv = Conv2d(2, 3, rng, bias=False)
        assert len(conv.param_items()) == 1
        err = grad_check_layer(conv, rng.uniform(-1.5, 1.5, (2, 2, 5, 5)), eps=1e-6)
        assert err < 1e-6


class TestActivations:
    def test_relu_definition(self):
        assert activation(np.array([-1.0]), "relu")[0] == 0.0
        assert activation(np.array([2.0]), "relu")[0] == 2.0

    def test_sigmoid_symmetry_point(self):
        assert activation(np.array([0.0]), "sigmoid")[0] == 0.5

    def test_softmax_equal_logits(self):
        for k in (2, 3, 5):
            out = activation(np.zeros((1, k)), "softmax_channel")
            assert np.allclose(out, 1.0 / k)

    def test_softmax_sums_to_one_per_location(self, rng):
        out = activation(rng.normal(size=(2, 4, 5, 5)), "softmax_channel")
        assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)

    def test_unknown_kind(self):
        from mucald.exceptions import ConfigError
        with pytest.raises(ConfigError):
            activation(np.zeros(3), "tanh")

    @pytest.mark.parametrize("layer_cls", [ReLU, Sigmoid])
    def test_elementwise_gradients(self, layer_cls, rng):
        probe = rng.uniform(-1.5, 1.5, (3, 7)) + 0.05
        assert grad_check_layer(layer_cls(), probe, eps=1e-6) < 1e-6


class TestPoolingAndNorm:
    def test_avg_pool_gradient(self, rng):
        assert grad_check_layer(AvgPool2(), rng.uniform(-1, 1, (2, 3, 4, 4))) < 1e-7

    def test_upsample_gradient(self, rng):
        assert grad_check_layer(Upsample2(), rng.uniform(-1, 1, (2, 3, 3, 3))) < 1e-7

    def test_global_pool_gradient(self, rng):
        assert grad_check_layer(GlobalAvgPool(), rng.uniform(-1, 1, (2, 3, 4, 4))) < 1e-7

    def test_pool_upsample_roundtrip_shape(self, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        assert Upsample2().forward(AvgPool2().forward(x)).shape == x.shape

    def test_instance_norm_output_standardized(self, rng):
        out = InstanceNorm2d(3).forward(rng.normal(2.0, 3.0, size=(2, 3, 8, 8)))
        assert np.allclose(out.mean(axis=(2, 3)), 0.0, atol=1e-10)
        assert np.allclose(out.std(axis=(2, 3)), 1.0, atol=1e-3)


class TestAdam:
    def test_zero_gradient_leaves_params(self, rng):
        layer = Linear(2, 2, rng)
        before = layer.weights.data.copy()
        opt = Adam(layer.param_items())
        layer.weights.grad[...] = 0.0
        opt.step()
        assert np.array_equal(layer.weights.data, before)

    def test_first_step_closed_form(self, rng):
        # bias-corrected m/sqrt(v) = 1 for a constant unit gradient
        layer = Linear(1, 1, rng)
        layer.weights.data[...] = 5.0
        opt = Adam(layer.param_items(), lr=0.1)
        layer.weights.grad[...] = 1.0
        opt.step()
        assert layer.weights.data[0, 0] == pytest.approx(5.0 - 0.1, abs=1e-8)

    def test_identical_layers_identical_updates(self, rng):
        a = Linear(3, 3, np.random.default_rng(7))
        b = Linear(3, 3, np.random.default_rng(7))
        opt_a = Adam(a.param_items())
        opt_b = Adam(b.param_items())
        g = rng.normal(size=(3, 3))
        a.weights.grad[...] = g
        b.weights.grad[...] = g
        opt_a.step()
        opt_b.step()
        assert np.array_equal(a.weights.data, b.weights.data)

    def test_nan_gradient_names_layer(self, rng):
        layer = Linear(2, 2, rng, name="offender")
        opt = Adam(layer.param_items())
        layer.weights.grad[...] = np.nan
        with pytest.raises(DataError, match="offender"):
            opt.step()

    def test_gradients_zeroed_after_step(self, rng):
        layer = Linear(2, 2, rng)
        opt = Adam(layer.param_items())
        layer.weights.grad[...] = 1.0
        opt.step()
        assert np.array_equal(layer.weights.grad, np.zeros((2, 2)))


class TestGradCheckHarness:
    def test_sign_flip_detected(self, rng):
        layer = Linear(3, 3, rng)
        err = grad_check(layer.forward, lambda up: -layer.backward(up),
                         rng.uniform(-1, 1, (2, 3)))
        assert err == pytest.approx(2.0, abs=1e-6)

    def test_eps_bounds_enforced(self, rng):
        from mucald.exceptions import ConfigError
        layer = Linear(2, 2, rng)
        with pytest.raises(ConfigError):
            grad_check(layer.forward, layer.backward, np.zeros((1, 2)), eps=1e-3)

    def test_probe_range_enforced(self, rng):
        from mucald.exceptions import ConfigError
        layer = Linear(2, 2, rng)
        with pytest.raises(ConfigError):
            grad_check(layer.forward, layer.backward, np.full((1, 2), 3.0))

    def test_nonfinite_analytic_reports_infinite(self, rng):
        layer = Linear(2, 2, rng)

        def bad_backward(up):
            out = layer.backward(up)
            return out * np.nan

        err = grad_check(layer.forward, bad_backward, rng.uniform(-1, 1, (1, 2)))
        assert err == np.inf

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_every_layer_kind_three_seeds(self, seed):
        rng = np.random.default_rng(seed)
        assert grad_check_layer(Linear(3, 4, rng), rng.uniform(-1.5, 1.5, (2, 3))) < 1e-6
        assert grad_check_layer(Conv2d(2, 2, rng), rng.uniform(-1.5, 1.5, (1, 2, 5, 5)),
                                eps=1e-6) < 1e-6
        assert grad_check_layer(Sigmoid(), rng.uniform(-1.5, 1.5, (2, 5))) < 1e-6


class TestParamSerialization:
    def test_flatten_roundtrip_bit_identical(self, rng):
        layers = Sequential([Linear(3, 4, rng), ReLU(), Linear(4, 2, rng)])
        tensors = layers.parameters()
        flat = flatten_tensors(tensors)
        originals = [t.data.copy() for t in tensors]
        for t in tensors:
            t.data[...] = 0.0
        load_flat(tensors, flat)
        for t, orig in zip(tensors, originals):
            assert np.array_equal(t.data, orig)

    def test_checkpoint_roundtrip(self, tmp_path, rng):
        arrays = [rng.normal(size=s) for s in [(3, 4), (7,), (2, 3, 3, 3)]]
        path = tmp_path / "params.mcsf"
        save_tensors(path, arrays)
        loaded = load_tensors(path)
        assert len(loaded) == 3
        for orig, back in zip(arrays, loaded):
            assert np.array_equal(orig, back)

    def test_checkpoint_magic(self, tmp_path):
        blob = dump_tensors([np.zeros((2, 2))])
        assert blob[:4] == b"MCSF"
        from mucald.exceptions import FrameError
        with pytest.raises(FrameError, match="offset 0"):
            parse_tensors(b"XXXX" + blob[4:])

    def test_checkpoint_truncation(self):
        from mucald.exceptions import FrameError
        blob = dump_tensors([np.ones((4, 4))])
        with pytest.raises(FrameError, match="truncated"):
            parse_tensors(blob[:-8])


class TestCrossEntropy:
    def test_uniform_logits_log_k(self):
        for k in (2, 5):
            loss, _ = cross_entropy_logits(np.zeros((3, k)), np.zeros(3, dtype=int))
            assert loss == pytest.approx(np.log(k), abs=1e-12)

    def test_gradient_matches_softmax_minus_onehot(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 1])
        _, grad = cross_entropy_logits(logits, labels)
        probs = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        onehot = np.eye(3)[labels]
        assert np.allclose(grad, (probs - onehot) / 4)


def test_forward_deterministic(rng):
    layer = Conv2d(2, 3, np.random.default_rng(3))
    x = rng.normal(size=(2, 2, 6, 6))
    assert np.array_equal(layer.forward(x), layer.forward(x))


def test_tensor_invariants():
    t = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.grad.shape == t.data.shape
    with pytest.raises(ShapeMismatchError):
        t.accumulate_grad(np.zeros((3, 2)))
