import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushbroom import autodiff as ad
from pushbroom.autodiff import ShapeError, Tensor
from pushbroom.gradcheck import gradcheck
from pushbroom.layers import (ChannelAttention, Conv1d, DascBlock, DepthwiseConv1d, LayerNorm,
                              Linear, SimplifiedChannelAttention, simple_gate)

TOL = 1e-4


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def perturb(module, rng, scale=0.5):
    """Give zero-initialised parameters (biases, residual scales) random values."""
    for _, p in module.named_parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


def check_module(module, x):
    params = module.parameters()
    return gradcheck(lambda: module(x), [x] + params)


def test_conv_identity_kernel_passes_input_through():
    conv = Conv1d(1, 1, 1, np.random.default_rng(0))
    conv.weight.data[:] = 1.0
    x = np.random.default_rng(1).standard_normal((1, 5, 1))
    np.testing.assert_array_equal(conv(Tensor(x)).data, x)


def test_conv_hand_oracle():
    conv = Conv1d(1, 1, 3, np.random.default_rng(0))
    conv.weight.data[:] = np.array([0.0, 0.0, 1.0]).reshape(1, 1, 3)
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1)
    np.testing.assert_array_equal(conv(Tensor(x)).data.ravel(), [2.0, 3.0, 4.0, 0.0])


@pytest.mark.parametrize("n", [7, 8, 9, 16])
def test_conv_length_rules(n):
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((1, n, 3)))
    assert Conv1d(3, 4, 3, rng)(x).shape == (1, n, 4)
    down = Conv1d(3, 4, 3, rng, stride=2)(x)
    assert down.shape == (1, -(-n // 2), 4)
    assert Conv1d(4, 3, 2, rng, stride=2, mode="transpose")(down).shape == (1, 2 * -(-n // 2), 3)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError, match="conv1d"):
        Conv1d(3, 4, 3, np.random.default_rng(0))(Tensor(np.ones((1, 5, 2))))


@pytest.mark.parametrize("kind", ["plain", "stride2", "transpose", "depthwise", "linear"])
def test_conv_layer_gradients(kind):
    rng = np.random.default_rng(3)
    x = rand(rng, 1, 8, 4)
    layer = {
        "plain": lambda: Conv1d(4, 3, 3, rng),
        "stride2": lambda: Conv1d(4, 3, 3, rng, stride=2),
        "transpose": lambda: Conv1d(4, 3, 2, rng, stride=2, mode="transpose"),
        "depthwise": lambda: DepthwiseConv1d(4, 3, rng),
        "linear": lambda: Linear(4, 5, rng),
    }[kind]()
    perturb(layer, rng)
    assert check_module(layer, x) < TOL


def test_norm_and_attention_gradients():
    rng = np.random.default_rng(4)
    x = rand(rng, 1, 8, 4)
    for layer in (LayerNorm(4), ChannelAttention(4, rng), SimplifiedChannelAttention(4, rng)):
        perturb(layer, rng)
        assert check_module(layer, x) < TOL


def test_dasc_gradients():
    rng = np.random.default_rng(5)
    block = DascBlock(4, rng)
    perturb(block, rng)
    assert check_module(block, rand(rng, 1, 8, 4)) < TOL


def test_layernorm_gradient_through_sum_example():
    rng = np.random.default_rng(6)
    x = rand(rng, 1, 8, 4)
    assert gradcheck(lambda: ad.layernorm(x), [x]) < TOL


def test_dasc_is_identity_at_init():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 8, 6))
    np.testing.assert_array_equal(DascBlock(6, rng)(Tensor(x)).data, x)


def test_dasc_linear_variant_is_homogeneous():
    rng = np.random.default_rng(8)
    block = DascBlock(4, rng, use_norm=False, use_gate=False, use_attention=False)
    block.beta.data[:] = rng.standard_normal(4)
    block.gamma.data[:] = rng.standard_normal(4)
    x = rng.standard_normal((1, 8, 4))
    f1 = block(Tensor(x)).data - x
    f2 = block(Tensor(2 * x)).data - 2 * x
    np.testing.assert_allclose(f2, 2 * f1, atol=1e-12)


def test_simple_gate_cases():
    rng = np.random.default_rng(9)
    a = rng.standard_normal((1, 4, 3))
    np.testing.assert_array_equal(simple_gate(Tensor(np.concatenate([a, np.ones_like(a)], -1))).data, a)
    assert not simple_gate(Tensor(np.concatenate([a, np.zeros_like(a)], -1))).data.any()
    x = rng.standard_normal((1, 4, 6))
    np.testing.assert_array_equal(simple_gate(Tensor(x)).data, x[..., :3] * x[..., 3:])
    with pytest.raises(ShapeError):
        simple_gate(Tensor(np.ones((1, 4, 5))))


def test_channel_attention_zero_excite_gates_at_half():
    rng = np.random.default_rng(10)
    ca = ChannelAttention(8, rng)
    ca.excite.weight.data[:] = 0.0
    x = rng.standard_normal((1, 6, 8))
    np.testing.assert_array_equal(ca(Tensor(x)).data, x * 0.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_channel_attention_weights_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    ca = ChannelAttention(8, rng)
    x = Tensor(rng.standard_normal((1, n, 8)) * 3)
    g = ca.gate(x).data
    assert ((g > 0) & (g < 1)).all()
    assert ca(x).shape == x.shape


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_layers_act_on_each_line_separately(n, seed):
    """Stacking lines along the line axis equals running each line alone."""
    rng = np.random.default_rng(seed)
    block = DascBlock(4, rng)
    perturb(block, rng)
    x = rng.standard_normal((3, n, 4))
    stacked = block(Tensor(x)).data
    for l in range(3):
        np.testing.assert_allclose(stacked[l:l + 1], block(Tensor(x[l:l + 1])).data, atol=1e-12)


def test_flops_of_pointwise_conv():
    assert Conv1d(2, 3, 1, np.random.default_rng(0)).flops() == 12
