import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from cassi_tools import nn_core as nn
from cassi_tools.errors import ConfigError, DimensionError, NonFiniteError, UsageError


def f64(data):
    return nn.Tensor(np.asarray(data, dtype=np.float64))


def leaf(data):
    return nn.Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class TestConv2d:
    def test_identity_kernel(self, rng):
        x = f64(rng.random((1, 4, 4, 1)))
        out = nn.conv2d(x, f64(np.ones((1, 1, 1, 1))))
        assert_array_equal(out.data, x.data)

    def test_all_ones_sum(self):
        out = nn.conv2d(f64(np.ones((1, 3, 3, 1))), f64(np.ones((3, 3, 1, 1))))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    def test_depthwise_matches_block_diagonal_standard(self, rng):
        x = f64(rng.standard_normal((1, 8, 8, 4)))
        wd = rng.standard_normal((3, 3, 4))
        ws = np.zeros((3, 3, 4, 4))
        for c in range(4):
            ws[:, :, c, c] = wd[:, :, c]
        dw = nn.conv2d(x, f64(wd), padding=1, mode="depthwise")
        st = nn.conv2d(x, f64(ws), padding=1, mode="standard")
        assert_allclose(dw.data, st.data, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("mode, shape, stride, padding, expected", [
        ("standard", (4, 4, 3, 5), 2, 1, (2, 4, 4, 5)),
        ("standard", (3, 3, 3, 5), 1, 1, (2, 8, 8, 5)),
        ("depthwise", (7, 7, 3), 1, 3, (2, 8, 8, 3)),
        ("transposed", (2, 2, 3, 5), 2, 0, (2, 16, 16, 5)),
    ])
    def test_output_extents(self, rng, mode, shape, stride, padding, expected):
        x = f64(rng.standard_normal((2, 8, 8, 3)))
        out = nn.conv2d(x, f64(rng.standard_normal(shape)), stride=stride, padding=padding, mode=mode)
        assert out.shape == expected

    @pytest.mark.parametrize("mode, shape, stride, padding", [
        ("standard", (3, 3, 3, 4), 1, 1),
        ("standard", (4, 4, 3, 2), 2, 1),
        ("depthwise", (5, 5, 3), 1, 2),
        ("transposed", (2, 2, 3, 4), 2, 0),
    ])
    def test_backward_input_is_adjoint(self, rng, mode, shape, stride, padding):
        x = rng.standard_normal((2, 8, 8, 3))
        w = rng.standard_normal(shape)
        out = nn.conv2d_forward(x, w, stride, padding, mode)
        g = rng.standard_normal(out.shape)
        lhs = np.sum(out * g)
        rhs = np.sum(x * nn.conv2d_backward_input(g, w, x.shape, stride, padding, mode))
        assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), abs(rhs))

    def test_channel_mismatch_names_axis(self, rng):
        with pytest.raises(DimensionError) as err:
            nn.conv2d(f64(np.zeros((1, 4, 4, 2))), f64(np.zeros((3, 3, 3, 1))))
        assert err.value.axis == "channels"

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError) as err:
            nn.conv2d(f64(np.zeros((1, 2, 8, 1))), f64(np.zeros((3, 3, 1, 1))))
        assert err.value.axis == "height"

    def test_bad_mode(self):
        with pytest.raises(ConfigError):
            nn.conv2d(f64(np.zeros((1, 4, 4, 1))), f64(np.zeros((1, 1, 1, 1))), mode="dilated")


class TestLayerNorm:
    def test_constant_input_gives_offset(self):
        x = f64(np.full((1, 2, 2, 3), 5.0))
        offset = f64([0.1, -0.2, 0.3])
        out = nn.layer_norm(x, f64(np.ones(3)), offset)
        assert_allclose(out.data, np.broadcast_to(offset.data, out.shape), atol=1e-12)

    def test_normalized_statistics(self, rng):
        x = f64(rng.standard_normal((2, 4, 4, 16)) * 3.0 + 1.0)
        out = nn.layer_norm(x, f64(np.ones(16)), f64(np.zeros(16))).data
        assert np.max(np.abs(out.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-4

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError) as err:
            nn.layer_norm(f64(np.zeros((1, 2, 2, 3))), f64(np.ones(4)), f64(np.zeros(4)))
        assert err.value.axis == "channels"


class TestActivations:
    def test_gelu_values(self):
        assert nn.gelu(f64([0.0])).item() == 0.0
        assert abs(nn.gelu(f64([10.0])).item() - 10.0) < 1e-4

    def test_gelu_derivative_at_zero(self):
        x = leaf([0.0])
        with nn.Tape():
            loss = nn.sum_(nn.gelu(x))
        nn.backward(loss)
        assert_allclose(x.grad, [0.5])

    def test_softplus_of_zero(self):
        assert_allclose(nn.softplus(f64([0.0])).data, [np.log(2.0)])

    def test_softplus_is_positive_for_large_negative_input(self):
        assert nn.softplus(f64([-50.0])).item() > 0.0


class TestLinearAndPool:
    def test_identity_weight(self, rng):
        x = f64(rng.standard_normal((3, 4)))
        assert_array_equal(nn.linear(x, f64(np.eye(4)), f64(np.zeros(4))).data, x.data)

    def test_small_affine(self):
        out = nn.linear(f64([[1.0, 2.0]]), f64([[1.0, 1.0], [0.0, 1.0]]), f64([0.0, 0.0]))
        assert_array_equal(out.data, [[3.0, 2.0]])

    def test_feature_mismatch(self):
        with pytest.raises(DimensionError):
            nn.linear(f64(np.zeros((1, 3))), f64(np.zeros((2, 4))))

    def test_pool_constant(self):
        out = nn.global_avg_pool(f64(np.full((1, 3, 5, 2), 0.7)))
        assert out.shape == (1, 1, 1, 2)
        assert_allclose(out.data, 0.7)

    def test_pool_arithmetic(self):
        x = f64(np.arange(4.0).reshape(1, 2, 2, 1))
        assert nn.global_avg_pool(x).item() == 1.5

    def test_pool_gradient_is_uniform(self):
        x = leaf(np.zeros((1, 2, 3, 1)))
        with nn.Tape():
            loss = nn.sum_(nn.global_avg_pool(x))
        nn.backward(loss)
        assert_allclose(x.grad, np.full(x.shape, 1.0 / 6.0))


class TestDropPath:
    def test_rate_zero_is_identity(self, rng):
        x = f64(rng.random((4, 2, 2, 1)))
        assert nn.drop_path(x, 0.0, True, rng) is x

    def test_eval_is_identity(self, rng):
        x = f64(rng.random((4, 2, 2, 1)))
        assert nn.drop_path(x, 0.5, False) is x

    def test_rate_one_rejected(self, rng):
        with pytest.raises(ConfigError):
            nn.drop_path(f64(np.ones((2, 1, 1, 1))), 1.0, True, rng)

    def test_training_needs_rng(self):
        with pytest.raises(UsageError):
            nn.drop_path(f64(np.ones((2, 1, 1, 1))), 0.2, True)

    def test_expectation_preserved(self, rng):
        x = f64(np.ones((100_000, 1, 1, 1)))
        out = nn.drop_path(x, 0.3, True, rng)
        assert abs(out.data.mean() - 1.0) < 0.01
        assert set(np.unique(np.round(out.data, 6))) <= {0.0, round(1 / 0.7, 6)}


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.random((2, 3)))
        with nn.Tape():
            loss = nn.sum_(x)
        nn.backward(loss)
        assert_array_equal(x.grad, np.ones((2, 3)))

    def test_product_rule(self, rng):
        a, b = leaf(rng.random(5)), leaf(rng.random(5))
        with nn.Tape():
            loss = nn.sum_(a * b)
        nn.backward(loss)
        assert_allclose(a.grad, b.data)
        assert_allclose(b.grad, a.data)

    def test_non_scalar_loss(self, rng):
        x = leaf(rng.random(3))
        with nn.Tape():
            out = x * 2.0
        with pytest.raises(UsageError):
            nn.backward(out)

    def test_item_needs_one_element(self, rng):
        assert nn.Tensor(np.array([[2.5]])).item() == 2.5
        with pytest.raises(UsageError, match="one-element"):
            nn.Tensor(rng.random(3)).item()

    def test_unrecorded_loss(self, rng):
        x = leaf(rng.random(3))
        with pytest.raises(UsageError):
            nn.backward(nn.sum_(x))

    def test_gradient_accumulates(self, rng):
        p = nn.Parameter(rng.random(4), dtype=np.float64)
        for _ in range(2):
            with nn.Tape():
                loss = nn.sum_(p * 3.0)
            nn.backward(loss)
        assert_allclose(p.grad, np.full(4, 6.0))

    def test_broadcast_gradient(self):
        x = leaf(np.ones((2, 3)))
        b = leaf(np.ones((1, 3)))
        with nn.Tape():
            loss = nn.sum_(x + b)
        nn.backward(loss)
        assert_array_equal(b.grad, np.full((1, 3), 2.0))

    def test_tape_lists_parameters_in_use_order(self, rng):
        layer = nn.Linear(3, 2, rng=rng, dtype=np.float64)
        layer.parameters()
        with nn.Tape() as tape:
            layer(f64(np.ones((1, 3))))
        assert [p.name for p in tape.parameters()] == ["weight", "bias"]

    def test_debug_mode_flags_non_finite(self):
        nn.set_debug(True)
        try:
            with pytest.raises(NonFiniteError):
                with np.errstate(divide="ignore"):
                    nn.div(f64([1.0]), f64([0.0]))
        finally:
            nn.set_debug(False)


@pytest.mark.parametrize("name", ["conv_standard", "conv_depthwise", "conv_transposed",
                                  "layer_norm", "gelu", "linear", "pool", "softplus", "take_concat"])
def test_primitive_gradcheck(rng, name):
    x = f64(rng.standard_normal((2, 6, 6, 3)))
    w4, w3, b = f64(rng.standard_normal((3, 3, 3, 4))), f64(rng.standard_normal((3, 3, 3))), f64(rng.standard_normal(4))
    wt = f64(rng.standard_normal((2, 2, 3, 4)))
    gain, offset = f64(rng.standard_normal(3)), f64(rng.standard_normal(3))
    v, weight, bias = f64(rng.standard_normal((4, 5))), f64(rng.standard_normal((3, 5))), f64(rng.standard_normal(3))
    cases = {
        "conv_standard": (lambda: nn.conv2d(x, w4, b, 2, 1), [x, w4, b]),
        "conv_depthwise": (lambda: nn.conv2d(x, w3, None, 1, 1, "depthwise"), [x, w3]),
        "conv_transposed": (lambda: nn.conv2d(x, wt, b, 2, 0, "transposed"), [x, wt, b]),
        "layer_norm": (lambda: nn.layer_norm(x, gain, offset), [x, gain, offset]),
        "gelu": (lambda: nn.gelu(x), [x]),
        "linear": (lambda: nn.linear(v, weight, bias), [v, weight, bias]),
        "pool": (lambda: nn.global_avg_pool(x), [x]),
        "softplus": (lambda: nn.softplus(x), [x]),
        "take_concat": (lambda: nn.concat([nn.take(x, (slice(None), slice(0, 3))),
                                           nn.take(x, (slice(None), slice(3, 6)))]), [x]),
    }
    fn, inputs = cases[name]
    assert nn.gradcheck(fn, inputs, name=name, rng=rng).passed(1e-4)


class TestModule:
    def test_parameter_names_follow_attributes(self, rng):
        layer = nn.Conv2d(2, 3, 3, rng=rng)
        assert [p.name for p in layer.parameters()] == ["weight", "bias"]
        assert layer.num_parameters() == 3 * 3 * 2 * 3 + 3

    def test_same_seed_same_weights(self):
        a = nn.Conv2d(2, 3, 3, rng=np.random.default_rng(1))
        b = nn.Conv2d(2, 3, 3, rng=np.random.default_rng(1))
        assert_array_equal(a.weight.data, b.weight.data)

    def test_init_is_truncated(self, rng):
        values = nn.trunc_normal(rng, (10_000,), std=0.02)
        assert np.max(np.abs(values)) <= 0.04 + 1e-7

    def test_state_dict_round_trip(self, rng):
        a = nn.Linear(3, 2, rng=rng)
        b = nn.Linear(3, 2, rng=np.random.default_rng(0))
        b.load_state_dict(a.state_dict())
        assert_array_equal(a.weight.data, b.weight.data)

    def test_state_dict_mismatch(self, rng):
        with pytest.raises(ConfigError, match="missing"):
            nn.Linear(3, 2, rng=rng).load_state_dict({"weight": np.zeros((2, 3))})

    def test_assign_checks_shape(self):
        p = nn.Parameter(np.zeros(3), name="p")
        with pytest.raises(DimensionError):
            p.assign(np.zeros(4))

    def test_rank_limit(self):
        with pytest.raises(DimensionError):
            nn.Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_depthwise_kernel_must_be_odd(self, rng):
        with pytest.raises(ConfigError):
            nn.DepthwiseConv2d(3, 4, rng=rng)
