"""Inter-line memory blocks: selective SSM (Mamba), LSTM and causal convolution.

Each block is residual, ``v + mixer(LayerNorm(v))``, and runs in two modes
that compute the same recurrence:

* ``scan(v)`` over a whole stack of lines ``[..., L, N, F]`` (training);
* ``step(v_line, state)`` on one ``[1, N, F]`` line, carrying a
  :class:`StreamState` whose size does not depend on how many lines went by.

The recurrence runs independently for every across-track pixel; only the
along-track (line) axis is mixed here.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import LayerNorm, Linear, Module, param

BACKENDS = ("mamba", "lstm", "causal_conv")
_MAGIC = b"PBST"
_VERSION = 1
_DTYPES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


class StateFormatError(ValueError):
    pass


@dataclass
class StreamState:
    """Carry-over of one memory block between consecutive lines."""

    backend: str
    arrays: dict = field(default_factory=dict)
    line_index: int = 0

    @property
    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.arrays.values())

    def copy(self) -> "StreamState":
        return StreamState(self.backend, {k: v.copy() for k, v in self.arrays.items()}, self.line_index)

    def to_bytes(self) -> bytes:
        parts = [_MAGIC, struct.pack("<HBBQ", _VERSION, BACKENDS.index(self.backend),
                                     len(self.arrays), self.line_index)]
        for name, arr in self.arrays.items():
            arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            key = name.encode()
            parts.append(struct.pack("<B", len(key)) + key)
            parts.append(struct.pack("<BB", _DTYPES[arr.dtype], arr.ndim))
            parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "StreamState":
        if blob[:4] != _MAGIC:
            raise StateFormatError("not a stream-state blob (bad magic)")
        try:
            version, backend, count, line_index = struct.unpack_from("<HBBQ", blob, 4)
            if version != _VERSION:
                raise StateFormatError(f"unsupported stream-state version {version}")
            pos = 4 + struct.calcsize("<HBBQ")
            arrays = {}
            for _ in range(count):
                (klen,) = struct.unpack_from("<B", blob, pos)
                pos += 1
                name = blob[pos:pos + klen].decode()
                pos += klen
                code, ndim = struct.unpack_from("<BB", blob, pos)
                pos += 2
                shape = struct.unpack_from(f"<{ndim}I", blob, pos)
                pos += 4 * ndim
                dtype = _DTYPES_INV[code]
                n = int(np.prod(shape)) * dtype.itemsize
                if pos + n > len(blob):
                    raise StateFormatError("stream-state blob is truncated")
                arrays[name] = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)),
                                             offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
                pos += n
        except struct.error as exc:
            raise StateFormatError(f"stream-state blob is truncated: {exc}") from None
        return cls(BACKENDS[backend], arrays, line_index)


def _check_line(block, v: Tensor) -> None:
    if v.ndim != 3 or v.shape[0] != 1:
        raise ShapeError(f"{block}: expected a [1, N, C] line, got {v.shape}")


def causal_conv_step(ring: np.ndarray, x: Tensor, weight: Tensor, bias: Tensor | None = None):
    """One streaming step of a per-channel causal convolution over lines.

    ``ring`` holds the previous ``K - 1`` input lines ``[K-1, N, C]`` (zeros
    at stream start), ``x`` is the current ``[1, N, C]`` line and ``weight``
    is ``[C, K]`` with the last tap on the current line. Returns the output
    line and the rotated ring.
    """
    k = weight.shape[1]
    if ring.shape[0] != k - 1 or ring.shape[1:] != x.shape[1:]:
        raise ShapeError(f"causal_conv_step: ring {ring.shape} vs line {x.shape} and kernel {k}")
    window = ad.concat([Tensor(ring), x], axis=-3)
    out = ad.depthwise_conv(window, weight, axis=-3)
    if bias is not None:
        out = out + bias
    new_ring = window.data[1:] if k > 1 else ring
    return out, np.array(new_ring, copy=True)


class MambaBlock(Module):
    """Residual Mamba block: in-projection, causal conv over lines, SiLU,
    selective SSM, optional SiLU-gated branch, out-projection.

    Discretisation is zero-order hold for the transition, ``exp(delta * A)``,
    and ``delta * B`` for the input, with ``A = -exp(A_log)``.
    """

    kind = "mamba"

    def __init__(self, features: int, rng, expand: int = 1, state_size: int = 16,
                 kernel: int = 4, gated: bool = True):
        self.features, self.expand, self.state_size = features, expand, state_size
        self.kernel, self.gated = kernel, gated
        inner = features * expand
        self.inner = inner
        self.norm = LayerNorm(features)
        self.in_proj = Linear(features, 2 * inner if gated else inner, rng, bias=False)
        self.conv_weight = param(rng.uniform(-1, 1, size=(inner, kernel)) / math.sqrt(kernel))
        self.conv_bias = param(np.zeros(inner))
        self.x_proj_b = Linear(inner, state_size, rng, bias=False)
        self.x_proj_c = Linear(inner, state_size, rng, bias=False)
        self.dt_proj = Linear(inner, inner, rng)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=inner))
        self.dt_proj.bias = param(dt + np.log(-np.expm1(-dt)))  # inverse softplus
        self.a_log = param(np.tile(np.log(np.arange(1, state_size + 1, dtype=np.float64)), (inner, 1)))
        self.d_skip = param(np.ones(inner))
        self.out_proj = Linear(inner, features, rng, bias=False)

    # conv over lines is a depthwise conv: its weight is part of the fault surface
    injectable = ("conv_weight",)

    def init_state(self, n_cols: int, dtype=np.float64) -> StreamState:
        return StreamState(self.kind, {
            "conv_ring": np.zeros((self.kernel - 1, n_cols, self.inner), dtype=dtype),
            "h": np.zeros((n_cols, self.state_size, self.inner), dtype=dtype),
        })

    def transition(self) -> Tensor:
        return ad.neg(ad.exp(self.a_log))

    def _mix(self, v: Tensor, state: StreamState | None):
        u = self.norm(v)
        xz = self.in_proj(u)
        x = xz[..., : self.inner] if self.gated else xz
        if state is None:
            xc = ad.depthwise_conv(x, self.conv_weight, axis=-3, padding=(self.kernel - 1, 0))
            xc = xc + self.conv_bias
            new_ring, h0 = None, None
        else:
            xc, new_ring = causal_conv_step(state.arrays["conv_ring"], x, self.conv_weight, self.conv_bias)
            h0 = state.arrays["h"]
        xs = ad.silu(xc)
        delta = ad.softplus(self.dt_proj(xs))
        y, h_last = ad.selective_scan(xs, delta, self.transition(), self.x_proj_b(xs),
                                      self.x_proj_c(xs), self.d_skip, h0=h0, axis=-3)
        if self.gated:
            y = y * ad.silu(xz[..., self.inner:])
        out = v + self.out_proj(y)
        if state is None:
            return out, None
        return out, StreamState(self.kind, {"conv_ring": new_ring, "h": h_last}, state.line_index + 1)

    def scan(self, v: Tensor) -> Tensor:
        return self._mix(v, None)[0]

    def step(self, v: Tensor, state: StreamState):
        _check_line("mamba", v)
        return self._mix(v, state)

    def flops(self) -> int:
        e, s, k = self.inner, self.state_size, self.kernel
        total = self.in_proj.flops() + 2 * e * k + self.dt_proj.flops()
        total += self.x_proj_b.flops() + self.x_proj_c.flops() + self.out_proj.flops()
        # scan: delta*u times B (2 per state), decay and accumulate (2), readout (2)
        return total + 6 * e * s


class LSTMBlock(Module):
    """Residual per-pixel LSTM over lines, hidden size ``features * expand``."""

    kind = "lstm"

    def __init__(self, features: int, rng, expand: int = 1, **_):
        self.features = features
        self.hidden = hidden = features * expand
        self.norm = LayerNorm(features)
        self.w_ih = Linear(features, 4 * hidden, rng)
        self.w_hh = Linear(hidden, 4 * hidden, rng, bias=False)
        bias = np.zeros(4 * hidden)
        bias[hidden:2 * hidden] = 1.0  # forget gate
        self.w_ih.bias = param(bias)
        self.out_proj = Linear(hidden, features, rng, bias=False)

    def init_state(self, n_cols: int, dtype=np.float64) -> StreamState:
        return StreamState(self.kind, {
            "h": np.zeros((n_cols, self.hidden), dtype=dtype),
            "c": np.zeros((n_cols, self.hidden), dtype=dtype),
        })

    def _run(self, v: Tensor, h: Tensor, c: Tensor):
        gates_in = self.w_ih(self.norm(v))
        H = self.hidden
        outs = []
        for l in range(v.shape[-3]):
            g = gates_in[..., l, :, :] + self.w_hh(h)
            i = ad.sigmoid(g[..., :H])
            f = ad.sigmoid(g[..., H:2 * H])
            cand = ad.tanh(g[..., 2 * H:3 * H])
            o = ad.sigmoid(g[..., 3 * H:])
            c = f * c + i * cand
            h = o * ad.tanh(c)
            outs.append(h)
        return v + self.out_proj(ad.stack(outs, axis=-3)), h, c

    def scan(self, v: Tensor) -> Tensor:
        zeros = np.zeros(v.shape[:-3] + (v.shape[-2], self.hidden), dtype=v.dtype)
        return self._run(v, Tensor(zeros), Tensor(zeros))[0]

    def step(self, v: Tensor, state: StreamState):
        _check_line("lstm", v)
        out, h, c = self._run(v, Tensor(state.arrays["h"]), Tensor(state.arrays["c"]))
        return out, StreamState(self.kind, {"h": h.data, "c": c.data}, state.line_index + 1)

    def flops(self) -> int:
        # four gate products per hidden unit plus the cell update
        return self.w_ih.flops() + self.w_hh.flops() + self.out_proj.flops() + 6 * self.hidden


class CausalConvBlock(Module):
    """Residual causal convolution over lines: projection, depthwise causal
    conv with kernel ``K``, SiLU, projection back."""

    kind = "causal_conv"
    injectable = ("conv_weight",)

    def __init__(self, features: int, rng, expand: int = 1, kernel: int = 4, **_):
        self.features, self.kernel = features, kernel
        self.inner = inner = features * expand
        self.norm = LayerNorm(features)
        self.in_proj = Linear(features, inner, rng, bias=False)
        self.conv_weight = param(rng.uniform(-1, 1, size=(inner, kernel)) / math.sqrt(kernel))
        self.conv_bias = param(np.zeros(inner))
        self.out_proj = Linear(inner, features, rng, bias=False)

    def init_state(self, n_cols: int, dtype=np.float64) -> StreamState:
        return StreamState(self.kind, {
            "conv_ring": np.zeros((self.kernel - 1, n_cols, self.inner), dtype=dtype),
        })

    def scan(self, v: Tensor) -> Tensor:
        x = self.in_proj(self.norm(v))
        xc = ad.depthwise_conv(x, self.conv_weight, axis=-3, padding=(self.kernel - 1, 0))
        return v + self.out_proj(ad.silu(xc + self.conv_bias))

    def step(self, v: Tensor, state: StreamState):
        _check_line("causal_conv", v)
        x = self.in_proj(self.norm(v))
        xc, ring = causal_conv_step(state.arrays["conv_ring"], x, self.conv_weight, self.conv_bias)
        out = v + self.out_proj(ad.silu(xc))
        return out, StreamState(self.kind, {"conv_ring": ring}, state.line_index + 1)

    def flops(self) -> int:
        return self.in_proj.flops() + 2 * self.inner * self.kernel + self.out_proj.flops()


def make_memory_block(kind: str, features: int, rng, expand: int = 1, state_size: int = 16,
                      kernel: int = 4, gated: bool = True) -> Module:
    if kind == "mamba":
        return MambaBlock(features, rng, expand, state_size, kernel, gated)
    if kind == "lstm":
        return LSTMBlock(features, rng, expand)
    if kind == "causal_conv":
        return CausalConvBlock(features, rng, expand, kernel)
    raise ValueError(f"unknown memory backend {kind!r}; choose from {BACKENDS}")


def step_line(state: StreamState, block: Module, v: Tensor):
    """Advance ``block`` by one line; returns ``(v_out, new_state)``."""
    if state.backend != block.kind:
        raise ShapeError(f"state for {state.backend!r} given to a {block.kind!r} block")
    return block.step(v, state)


def scan_sequence(block: Module, v_all: Tensor) -> Tensor:
    """Run the same recurrence over all lines ``[..., L, N, F]`` at once."""
    if v_all.ndim < 3 or v_all.shape[-3] < 1:
        raise ShapeError(f"scan_sequence: expected [..., L, N, F], got {v_all.shape}")
    return block.scan(v_all)
