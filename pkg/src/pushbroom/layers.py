"""Spatially 1-D layers operating on channel-last lines.

Every layer takes arrays shaped ``[..., L, N, C]``: ``L`` along-track lines
(1 when streaming), ``N`` across-track columns and ``C`` channels. Nothing in
this module mixes information across the line axis; that is the job of the
memory blocks in :mod:`pushbroom.ssm`.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


class Module:
    """Parameter container with deterministic, name-addressable parameters.

    Attributes holding a :class:`Tensor` that requires a gradient are
    parameters; attributes holding a :class:`Module` (or a list of them) are
    walked recursively in assignment order. Names listed in ``injectable``
    mark convolution / linear weights, the fault-injection surface.
    """

    injectable: tuple = ()

    def named_parameters(self, prefix: str = ""):
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_weights(self, prefix: str = ""):
        """Injectable conv/linear weights, in parameter order."""
        out = []
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad and key in self.injectable:
                out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_weights(name + "."))
            elif isinstance(val, (list, tuple)) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    out.extend(m.named_weights(f"{name}.{i}."))
        return out

    def state_dict(self) -> dict:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> None:
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    """Dense map over the channel axis (a 1x1 convolution); weight is [in, out]."""

    injectable = ("weight",)

    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = kaiming_uniform(rng, (in_features, out_features), in_features)
        self.bias = param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"linear: input channels {x.shape[-1]} != {self.in_features}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias

    def flops(self) -> int:
        return 2 * self.in_features * self.out_features


class Conv1d(Module):
    """Learnable 1-D convolution along the across-track axis.

    ``mode="plain"``: stride 1 keeps the length ("same" zero padding), stride 2
    gives ``ceil(N / 2)``. ``mode="transpose"``: stride ``s`` and kernel ``s``
    give ``s * N``. Weight is [out, in, k].
    """

    injectable = ("weight",)

    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng, stride: int = 1,
                 mode: str = "plain", bias: bool = True):
        if mode not in ("plain", "transpose"):
            raise ValueError(f"unknown conv mode {mode!r}")
        if mode == "transpose" and kernel != stride:
            raise ValueError("transpose convolution requires kernel == stride")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.mode = stride, mode
        fan_in = in_ch * kernel
        self.weight = kaiming_uniform(rng, (out_ch, in_ch, kernel), fan_in)
        self.bias = param(np.zeros(out_ch)) if bias else None

    def padding(self) -> tuple:
        if self.stride == 1:
            return ((self.kernel - 1) // 2, self.kernel // 2)
        return ((self.kernel - 1) // 2, (self.kernel - 1) // 2)

    def out_length(self, n: int) -> int:
        if self.mode == "transpose":
            return n * self.stride
        pl, pr = self.padding()
        return (n + pl + pr - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_ch:
            raise ShapeError(f"conv1d: input channels {x.shape[-1]} != {self.in_ch}")
        if self.mode == "transpose":
            return ad.conv_transpose1d(x, self.weight, self.bias, stride=self.stride)
        return ad.conv1d(x, self.weight, self.bias, stride=self.stride, padding=self.padding())

    def flops(self) -> int:
        """Per output position; multiplies and adds counted separately."""
        if self.mode == "transpose":
            # each output position receives kernel / stride taps
            return 2 * self.in_ch * self.out_ch * self.kernel // self.stride
        return 2 * self.in_ch * self.out_ch * self.kernel


class DepthwiseConv1d(Module):
    injectable = ("weight",)

    def __init__(self, channels: int, kernel: int, rng, bias: bool = True):
        self.channels, self.kernel = channels, kernel
        self.weight = kaiming_uniform(rng, (channels, kernel), kernel)
        self.bias = param(np.zeros(channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        pad = ((self.kernel - 1) // 2, self.kernel // 2)
        y = ad.depthwise_conv(x, self.weight, axis=-2, padding=pad)
        return y if self.bias is None else y + self.bias

    def flops(self) -> int:
        return 2 * self.channels * self.kernel


class LayerNorm(Module):
    """Channel-axis LayerNorm, eps 1e-5, with affine scale and shift."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels = channels
        self.eps = eps
        self.weight = param(np.ones(channels))
        self.bias = param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"layernorm: input channels {x.shape[-1]} != {self.channels}")
        return ad.layernorm(x, self.eps) * self.weight + self.bias


def simple_gate(x: Tensor) -> Tensor:
    """Split channels in half and multiply: ``out[c] = x[c] * x[c + C/2]``."""
    c = x.shape[-1]
    if c % 2:
        raise ShapeError(f"simple_gate: channel count {c} is odd")
    h = c // 2
    return x[..., :h] * x[..., h:]


class ChannelAttention(Module):
    """CBAM channel attention: shared two-layer MLP on average- and max-pooled
    columns, summed, squashed by a sigmoid and used to rescale channels."""

    def __init__(self, channels: int, rng, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.squeeze = Linear(channels, hidden, rng)
        self.excite = Linear(hidden, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        avg = ad.mean(x, axis=-2, keepdims=True)
        mx = ad.amax(x, axis=-2, keepdims=True)
        logits = self.excite(ad.relu(self.squeeze(avg))) + self.excite(ad.relu(self.squeeze(mx)))
        return ad.sigmoid(logits)

    def __call__(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


class SimplifiedChannelAttention(Module):
    """NAFNet's SCA: rescale channels by a linear map of the column average."""

    def __init__(self, channels: int, rng):
        self.proj = Linear(channels, channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return x * self.proj(ad.mean(x, axis=-2, keepdims=True))


class DascBlock(Module):
    """NAFNet-style residual block adapted to 1-D lines.

    Two residual sub-blocks, each scaled by a learnable per-channel factor
    that starts at zero so a fresh block is the identity:

    * LN, pointwise C->2C, depthwise k, SimpleGate, SCA, pointwise C->C
    * LN, pointwise C->2C, SimpleGate, pointwise C->C

    ``use_norm`` / ``use_gate`` / ``use_attention`` switch the nonlinear
    pieces off (the gate then keeps the first half of the channels), which
    yields a purely linear block for testing.
    """

    def __init__(self, channels: int, rng, kernel: int = 3, expand: int = 2,
                 use_norm: bool = True, use_gate: bool = True, use_attention: bool = True):
        self.channels = channels
        self.use_norm, self.use_gate, self.use_attention = use_norm, use_gate, use_attention
        hidden = channels * expand
        self.norm1 = LayerNorm(channels)
        self.pw1 = Linear(channels, hidden, rng)
        self.dw = DepthwiseConv1d(hidden, kernel, rng)
        self.sca = SimplifiedChannelAttention(hidden // 2, rng)
        self.pw2 = Linear(hidden // 2, channels, rng)
        self.beta = param(np.zeros(channels))
        self.norm2 = LayerNorm(channels)
        self.pw3 = Linear(channels, hidden, rng)
        self.pw4 = Linear(hidden // 2, channels, rng)
        self.gamma = param(np.zeros(channels))

    def _gate(self, x: Tensor) -> Tensor:
        if self.use_gate:
            return simple_gate(x)
        return x[..., : x.shape[-1] // 2]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"dasc: input channels {x.shape[-1]} != {self.channels}")
        t = self.norm1(x) if self.use_norm else x
        t = self._gate(self.dw(self.pw1(t)))
        if self.use_attention:
            t = self.sca(t)
        y = x + self.pw2(t) * self.beta
        t = self.norm2(y) if self.use_norm else y
        t = self.pw4(self._gate(self.pw3(t)))
        return y + t * self.gamma

    def flops(self) -> int:
        # the SCA map acts once per line on the pooled vector and is not counted
        return (self.pw1.flops() + self.dw.flops() + self.pw2.flops()
                + self.pw3.flops() + self.pw4.flops())
