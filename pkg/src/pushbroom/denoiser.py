"""One line-wise denoiser: band projection, shallow refinement and a 1-D
U-Net of DASC blocks whose full-resolution stages carry an inter-line memory.

The denoiser emits features ``h`` of width ``F`` per pixel, not an image;
the projection back to bands lives in the mixture head.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .container import pack, unpack
from .layers import ChannelAttention, Conv1d, DascBlock, LayerNorm, Module
from .ssm import BACKENDS, StreamState, make_memory_block

MAGIC = b"PBDN"
VERSION = 1


class ConfigError(ValueError):
    pass


class FaultSuspected(RuntimeError):
    """A denoiser produced non-finite values; its output must not be used."""


@dataclass(frozen=True)
class DenoiserConfig:
    bands: int = 8
    features: int = 16
    levels: int = 3
    blocks: tuple = (2, 2, 2)
    backend: str = "mamba"
    kernel: int = 4
    expand: int = 1
    state_size: int = 16
    gated: bool = True
    proj_kernel: int = 3
    attn_reduction: int = 4
    pad_policy: str = "reflect"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if self.levels < 2:
            raise ConfigError("the U-Net needs at least two levels")
        if len(self.blocks) != self.levels:
            raise ConfigError(f"blocks {self.blocks} must list one count per level ({self.levels})")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}")
        if self.pad_policy not in ("reflect", "error"):
            raise ConfigError("pad_policy must be 'reflect' or 'error'")
        if self.features < 2 or self.bands < 1 or self.kernel < 1:
            raise ConfigError("features >= 2, bands >= 1 and kernel >= 1 are required")

    @classmethod
    def full_size(cls, bands: int = 31, **kw) -> "DenoiserConfig":
        """F=96, K=4, E=1, S=16: the full-size mixture member."""
        return cls(bands=bands, features=96, **kw)

    @property
    def widths(self) -> tuple:
        return tuple(self.features * 2 ** i for i in range(self.levels))

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def replace(self, **kw) -> "DenoiserConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["blocks"] = list(self.blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ConfigError(f"unknown denoiser config keys: {sorted(unknown)}")
        return cls(**d)


class Stage(Module):
    def __init__(self, width: int, count: int, rng):
        self.blocks = [DascBlock(width, rng) for _ in range(count)]

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def flops(self) -> int:
        return sum(b.flops() for b in self.blocks)


class Denoiser(Module):
    """Parameters of one mixture member (the fault-injection target)."""

    def __init__(self, config: DenoiserConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        c = config
        w = c.widths
        self.proj = Conv1d(c.bands, c.features, c.proj_kernel, rng)
        self.norm = LayerNorm(c.features)
        self.attn = ChannelAttention(c.features, rng, c.attn_reduction)
        self.encoders = [Stage(w[i], c.blocks[i], rng) for i in range(c.levels - 1)]
        self.downs = [Conv1d(w[i], w[i + 1], 3, rng, stride=2) for i in range(c.levels - 1)]
        self.middle = Stage(w[-1], c.blocks[-1], rng)
        self.ups = [Conv1d(w[i + 1], w[i], 2, rng, stride=2, mode="transpose")
                    for i in range(c.levels - 1)]
        self.decoders = [Stage(w[i], c.blocks[i], rng) for i in range(c.levels - 1)]
        mem = dict(expand=c.expand, state_size=c.state_size, kernel=c.kernel, gated=c.gated)
        self.memory_in = make_memory_block(c.backend, c.features, rng, **mem)
        self.memory_out = make_memory_block(c.backend, c.features, rng, **mem)

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def padded_width(self, n_cols: int) -> int:
        m = self.config.multiple
        if n_cols % m:
            if self.config.pad_policy == "error":
                raise ConfigError(f"{n_cols} columns is not a multiple of {m}")
        return -(-n_cols // m) * m

    def forward(self, y: Tensor, states=None):
        """Features for ``y`` [..., L, N, bands].

        Without ``states`` every line is processed at once (the memory blocks
        scan over L). With ``states`` (two :class:`StreamState`) ``y`` must be
        a single ``[1, N, bands]`` line and ``(h, new_states)`` is returned.
        """
        c = self.config
        if y.shape[-1] != c.bands:
            raise ShapeError(f"denoiser: expected {c.bands} bands, got input {y.shape}")
        n = y.shape[-2]
        padded = self.padded_width(n)
        if padded != n:
            idx = np.pad(np.arange(n), (0, padded - n), mode="reflect" if n > 1 else "edge")
            y = ad.take(y, idx, axis=-2)
        x = self.attn(ad.silu(self.norm(self.proj(y))))
        new_states = [None, None]
        skips = []
        for i in range(c.levels - 1):
            x = self.encoders[i](x)
            if i == 0:
                x, new_states[0] = self._memory(self.memory_in, x, states, 0)
            skips.append(x)
            x = self.downs[i](x)
        x = self.middle(x)
        for i in reversed(range(c.levels - 1)):
            x = self.ups[i](x) + skips[i]
            x = self.decoders[i](x)
        x, new_states[1] = self._memory(self.memory_out, x, states, 1)
        if padded != n:
            x = x[..., :n, :]
        return x if states is None else (x, new_states)

    __call__ = forward

    @staticmethod
    def _memory(block, x, states, i):
        if states is None:
            return block.scan(x), None
        return block.step(x, states[i])

    def init_states(self, n_cols: int, dtype=None) -> list:
        padded = self.padded_width(n_cols)
        dtype = dtype or self.dtype
        return [self.memory_in.init_state(padded, dtype), self.memory_out.init_state(padded, dtype)]

    # ------------------------------------------------------------ fault surface

    def weight_table(self):
        """``[(name, tensor, flat offset)]`` over all conv / linear weights.

        Flat ids ``offset .. offset + tensor.size - 1`` address the entries of
        each weight in C order.
        """
        table, offset = [], 0
        for name, t in self.named_weights():
            table.append((name, t, offset))
            offset += t.size
        return table

    def num_weights(self) -> int:
        return sum(t.size for _, t in self.named_weights())

    def copy(self) -> "Denoiser":
        clone = Denoiser(self.config)
        clone.astype(self.dtype)
        clone.load_state_dict(self.state_dict())
        return clone


class DenoiserStream:
    """Streaming carry-over for one denoiser: two memory states and a line counter."""

    def __init__(self, denoiser: Denoiser, n_cols: int, dtype=None):
        self.denoiser = denoiser
        self.n_cols = n_cols
        self.states = denoiser.init_states(n_cols, dtype)
        self.line_index = 0

    @property
    def nbytes(self) -> int:
        return sum(s.nbytes for s in self.states)

    def reset(self) -> None:
        self.states = self.denoiser.init_states(self.n_cols, self.states[0].arrays[
            next(iter(self.states[0].arrays))].dtype)
        self.line_index = 0

    def snapshot(self) -> list[bytes]:
        return [s.to_bytes() for s in self.states]

    def restore(self, blobs) -> None:
        self.states = [StreamState.from_bytes(b) for b in blobs]
        self.line_index = self.states[0].line_index


def denoiser_step(stream: DenoiserStream, y_line) -> np.ndarray:
    """Process one ``[1, N, bands]`` line and advance the stream.

    Raises :class:`FaultSuspected` (leaving the stream untouched) when the
    forward pass hits a non-finite value.
    """
    den = stream.denoiser
    y = y_line.data if isinstance(y_line, Tensor) else np.asarray(y_line)
    if y.ndim != 3 or y.shape[0] != 1 or y.shape[1] != stream.n_cols:
        raise ShapeError(f"denoiser_step: expected [1, {stream.n_cols}, bands], got {y.shape}")
    try:
        with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
            h, states = den.forward(Tensor(y, dtype=den.dtype), stream.states)
    except NumericError as exc:
        raise FaultSuspected(str(exc)) from exc
    stream.states = states
    stream.line_index += 1
    return h.data


def forward_image(denoiser: Denoiser, cube: np.ndarray) -> np.ndarray:
    """Batch features for a whole ``[L, N, bands]`` cube (no graph recorded)."""
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        try:
            return denoiser(Tensor(cube, dtype=denoiser.dtype)).data
        except NumericError as exc:
            raise FaultSuspected(str(exc)) from exc


def count_flops_per_pixel(denoiser: Denoiser) -> float:
    """Multiply and add count per full-resolution pixel of one line.

    Convolutions, dense maps, depthwise convs and the state-space scan are
    counted; normalisation, pointwise nonlinearities and the per-line pooled
    attention maps are not. Layers on level ``i`` run on ``N / 2**i`` pixels.
    """
    c = denoiser.config
    total = denoiser.proj.flops()
    total += denoiser.memory_in.flops() + denoiser.memory_out.flops()
    for i in range(c.levels - 1):
        scale = 2.0 ** -i
        total += (denoiser.encoders[i].flops() + denoiser.decoders[i].flops()) * scale
        total += denoiser.ups[i].flops() * scale
        total += denoiser.downs[i].flops() * scale / 2
    total += denoiser.middle.flops() * 2.0 ** -(c.levels - 1)
    return float(total)


def serialize(denoiser: Denoiser) -> bytes:
    return pack(MAGIC, VERSION, {"config": denoiser.config.to_dict()}, denoiser.state_dict())


def deserialize(blob: bytes) -> Denoiser:
    meta, arrays = unpack(blob, MAGIC, VERSION)
    den = Denoiser(DenoiserConfig.from_dict(meta["config"]))
    for name, p in den.named_parameters():
        p.data = p.data.astype(arrays[name].dtype)
    den.load_state_dict(arrays)
    return den
