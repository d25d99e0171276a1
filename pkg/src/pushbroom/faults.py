"""Weight-fault emulation on a denoiser's conv and linear weights.

Each weight is hit independently with probability ``p``. Two corruption
models are available:

``bitflip-msb``
    flip bit 30 of the float32 encoding (the top exponent bit), which scales
    a value by ``2**128`` or ``2**-128``; results beyond the float32 range
    are clamped to +-float32 max.
``additive-deviation``
    add ``delta * std(layer weights)``.

Weights are addressed by a flat id over :meth:`Denoiser.weight_table`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser

MODELS = ("bitflip-msb", "additive-deviation")
F32_MAX = float(np.finfo(np.float32).max)


class StaleManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FaultSpec:
    probability: float
    model: str = "bitflip-msb"
    delta: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"fault probability {self.probability} outside [0, 1]")
        if self.model not in MODELS:
            raise ValueError(f"unknown fault model {self.model!r}; choose from {MODELS}")


@dataclass
class Manifest:
    """Corrupted weights as ``(id, old, new)``; usable for one revert only."""

    records: list
    n_weights: int
    consumed: bool = field(default=False)

    def __len__(self):
        return len(self.records)

    def ids(self) -> np.ndarray:
        return np.array([r[0] for r in self.records], dtype=np.int64)


def flip_msb32(values) -> np.ndarray:
    """Flip bit 30 of each value's float32 encoding, clamped to the finite range."""
    bits = np.asarray(values, dtype=np.float32).view(np.uint32) ^ np.uint32(1 << 30)
    with np.errstate(invalid="ignore"):
        out = bits.view(np.float32).astype(np.float64)
    # an exponent field of all ones would be Inf/NaN; keep the sign, clamp the size
    bad = ~np.isfinite(out)
    out[bad] = np.copysign(F32_MAX, np.asarray(values, dtype=np.float64)[bad])
    return out


def _locate(table, ids):
    offsets = np.array([off for _, _, off in table], dtype=np.int64)
    slots = np.searchsorted(offsets, ids, side="right") - 1
    return slots, ids - offsets[slots]


def inject(den: Denoiser, spec: FaultSpec, uniforms: np.ndarray | None = None):
    """Corrupted copy of ``den`` and the manifest of changed weights.

    ``uniforms`` (one U[0,1) draw per weight) may be supplied to couple
    several probabilities: a weight is hit iff its draw is below ``p``.
    """
    table = den.weight_table()
    n = sum(t.size for _, t, _ in table)
    rng = np.random.default_rng(spec.seed)
    u = rng.random(n) if uniforms is None else np.asarray(uniforms)
    if u.shape != (n,):
        raise ValueError(f"expected {n} uniforms, got {u.shape}")
    ids = np.flatnonzero(u < spec.probability)
    clone = den.copy()
    records = []
    if ids.size:
        ctable = clone.weight_table()
        slots, local = _locate(ctable, ids)
        for slot in np.unique(slots):
            t = ctable[slot][1]
            sel = slots == slot
            flat = t.data.reshape(-1)
            old = flat[local[sel]].copy()
            if spec.model == "bitflip-msb":
                new = flip_msb32(old)
            else:
                new = old + spec.delta * float(table[slot][1].data.std())
                new = np.clip(new, -F32_MAX, F32_MAX)
            flat[local[sel]] = new
            records.extend(zip(ids[sel].tolist(), old.tolist(), new.tolist()))
        records.sort()
    return clone, Manifest(records, n)


def revert(den: Denoiser, manifest: Manifest) -> Denoiser:
    """Undo ``inject``; the manifest is consumed."""
    if manifest.consumed:
        raise StaleManifestError("manifest already consumed by an earlier revert")
    table = den.weight_table()
    n = sum(t.size for _, t, _ in table)
    ids = manifest.ids()
    if n != manifest.n_weights or (ids.size and (ids.min() < 0 or ids.max() >= n)):
        raise StaleManifestError("manifest does not match this denoiser's weight space")
    clone = den.copy()
    if ids.size:
        ctable = clone.weight_table()
        slots, local = _locate(ctable, ids)
        for (wid, old, _), slot, pos in zip(manifest.records, slots, local):
            ctable[slot][1].data.reshape(-1)[pos] = old
    manifest.consumed = True
    return clone


def write_manifest(path, manifest: Manifest) -> None:
    """Text manifest: header line then ``id old new`` with exact hex floats."""
    with open(path, "w") as fh:
        fh.write(f"# weights={manifest.n_weights} faults={len(manifest)}\n")
        for wid, old, new in manifest.records:
            fh.write(f"{wid} {float(old).hex()} {float(new).hex()}\n")


def read_manifest(path) -> Manifest:
    with open(path) as fh:
        header = fh.readline().split()
        n = int(header[1].split("=")[1])
        records = []
        for line in fh:
            wid, old, new = line.split()
            records.append((int(wid), float.fromhex(old), float.fromhex(new)))
    return Manifest(records, n)
