"""Cube files, line-at-a-time access and the run config schema.

Cube files are raw little-endian float32 in band-interleaved-by-line order:
for every line, each band's columns are contiguous, so one acquisition line
is one contiguous read of ``bands * cols * 4`` bytes. The byte offset of
(line ``l``, band ``b``, column ``c``) is ``((l * bands + b) * cols + c) * 4``.
A text sidecar ``<file>.hdr`` holds ``key = value`` lines::

    lines = 64
    columns = 64
    bands = 8
    dtype = float32
    byte_order = little
    interleave = bil
    scale = 1.0

Values on disk are ``cube * scale``; readers divide by ``scale``.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

import numpy as np

from .denoiser import ConfigError, DenoiserConfig
from .noise import spec_from_config
from .train import TrainConfig

DTYPE = np.dtype("<f4")


class HeaderError(ValueError):
    pass


@dataclass(frozen=True)
class CubeHeader:
    lines: int
    columns: int
    bands: int
    scale: float = 1.0

    @property
    def line_bytes(self) -> int:
        return self.columns * self.bands * DTYPE.itemsize

    @property
    def payload_bytes(self) -> int:
        return self.lines * self.line_bytes

    def text(self) -> str:
        return (f"lines = {self.lines}\ncolumns = {self.columns}\nbands = {self.bands}\n"
                f"dtype = float32\nbyte_order = little\ninterleave = bil\nscale = {self.scale!r}\n")


def header_path(path) -> str:
    return os.fspath(path) + ".hdr"


def parse_header(text: str, source: str = "<header>") -> CubeHeader:
    fields = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise HeaderError(f"{source}:{no}: expected 'key = value', got {raw.strip()!r}")
        fields[key.strip().lower()] = val.strip()
    try:
        for key in ("lines", "columns", "bands"):
            if key not in fields:
                raise HeaderError(f"{source}: missing required field {key!r}")
        hdr = CubeHeader(int(fields["lines"]), int(fields["columns"]), int(fields["bands"]),
                         float(fields.get("scale", 1.0)))
    except ValueError as exc:
        if isinstance(exc, HeaderError):
            raise
        raise HeaderError(f"{source}: {exc}") from None
    checks = {"dtype": "float32", "byte_order": "little", "interleave": "bil"}
    for key, want in checks.items():
        if fields.get(key, want).lower() != want:
            raise HeaderError(f"{source}: {key} = {fields[key]} is not supported (need {want})")
    if min(hdr.lines, hdr.columns, hdr.bands) < 1 or hdr.scale <= 0:
        raise HeaderError(f"{source}: dimensions and scale must be positive")
    return hdr


def read_header(path) -> CubeHeader:
    hp = header_path(path)
    try:
        with open(hp) as fh:
            return parse_header(fh.read(), hp)
    except FileNotFoundError:
        raise HeaderError(f"missing header sidecar {hp}") from None


def write_cube(path, cube: np.ndarray, scale: float = 1.0) -> None:
    """Store a ``[lines, cols, bands]`` cube (rounded to float32)."""
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"expected [lines, cols, bands], got shape {cube.shape}")
    hdr = CubeHeader(*cube.shape, scale=scale)
    bil = np.ascontiguousarray(np.transpose(cube, (0, 2, 1)) * scale, dtype=DTYPE)
    with open(path, "wb") as fh:
        fh.write(bil.tobytes())
    with open(header_path(path), "w") as fh:
        fh.write(hdr.text())


def _check_payload(path, hdr: CubeHeader) -> None:
    size = os.path.getsize(path)
    if size != hdr.payload_bytes:
        raise HeaderError(f"{path}: payload is {size} bytes but the header implies "
                          f"{hdr.lines}x{hdr.columns}x{hdr.bands}x4 = {hdr.payload_bytes}")


def read_cube(path) -> np.ndarray:
    """Whole cube as float32 ``[lines, cols, bands]``."""
    hdr = read_header(path)
    _check_payload(path, hdr)
    raw = np.fromfile(path, dtype=DTYPE).reshape(hdr.lines, hdr.bands, hdr.columns)
    out = np.transpose(raw, (0, 2, 1)).astype(np.float32)
    return out if hdr.scale == 1.0 else (out / np.float32(hdr.scale)).astype(np.float32)


class LineReader:
    """Reads one line per call and records how many lines it ever held.

    ``max_buffered`` stays at 1 unless a caller keeps old lines alive
    through :meth:`window`.
    """

    def __init__(self, path):
        self.path = path
        self.header = read_header(path)
        _check_payload(path, self.header)
        self._fh = open(path, "rb")
        self.next_line = 0
        self.max_buffered = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._fh.close()

    def __iter__(self):
        while self.next_line < self.header.lines:
            yield self.read_line()

    def read_line(self) -> np.ndarray:
        """Next line as ``[1, cols, bands]`` float32."""
        hdr = self.header
        if self.next_line >= hdr.lines:
            raise EOFError("no lines left")
        buf = self._fh.read(hdr.line_bytes)
        if len(buf) != hdr.line_bytes:
            raise HeaderError(f"{self.path}: short read at line {self.next_line}")
        self.next_line += 1
        self.max_buffered = max(self.max_buffered, 1)
        line = np.frombuffer(buf, dtype=DTYPE).reshape(hdr.bands, hdr.columns).T[None]
        line = line.astype(np.float32)
        return line if hdr.scale == 1.0 else (line / np.float32(hdr.scale)).astype(np.float32)


class LineWriter:
    def __init__(self, path, columns: int, bands: int, scale: float = 1.0):
        self.path = path
        self.columns, self.bands, self.scale = columns, bands, scale
        self.lines = 0
        self._fh = open(path, "wb")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def write_line(self, line: np.ndarray) -> None:
        line = np.asarray(line).reshape(self.columns, self.bands)
        self._fh.write(np.ascontiguousarray(line.T * self.scale, dtype=DTYPE).tobytes())
        self.lines += 1

    def close(self) -> None:
        if self._fh.closed:
            return
        self._fh.close()
        with open(header_path(self.path), "w") as fh:
            fh.write(CubeHeader(self.lines, self.columns, self.bands, self.scale).text())


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    """Everything ``train`` needs: the member architecture, the mixture, two
    training phases and the noise model."""

    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    members: int = 2
    seeds: tuple = (1, 2)
    tau: float = 0.01
    window: int = 1
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    joint: TrainConfig = field(default_factory=TrainConfig)


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _check_keys(section, allowed, name):
    unknown = set(section) - set(allowed) - set(section.parser.defaults())
    if unknown:
        raise ConfigError(f"unknown [{name}] keys: {sorted(unknown)}")


def parse_run_config(text: str) -> RunConfig:
    """Parse the INI-style run config (see README for the schema)."""
    p = configparser.ConfigParser()
    try:
        p.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(p.sections()) - {"denoiser", "mixture", "train", "noise"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    den = {}
    if p.has_section("denoiser"):
        s = p["denoiser"]
        ints = ("bands", "features", "levels", "kernel", "expand", "state_size", "proj_kernel",
                "attn_reduction", "seed")
        _check_keys(s, ints + ("blocks", "backend", "gated", "pad_policy"), "denoiser")
        for key in ints:
            if key in s:
                den[key] = s.getint(key)
        if "blocks" in s:
            den["blocks"] = _ints(s["blocks"])
        for key in ("backend", "pad_policy"):
            if key in s:
                den[key] = s[key].strip()
        if "gated" in s:
            den["gated"] = s.getboolean("gated")
        if "levels" in den and "blocks" not in den:
            den["blocks"] = (2,) * den["levels"]
    cfg = RunConfig(denoiser=DenoiserConfig(**den))
    if p.has_section("mixture"):
        s = p["mixture"]
        _check_keys(s, ("members", "seeds", "tau", "window"), "mixture")
        cfg.members = s.getint("members", cfg.members)
        cfg.seeds = _ints(s["seeds"]) if "seeds" in s else tuple(range(1, cfg.members + 1))
        cfg.tau = s.getfloat("tau", cfg.tau)
        cfg.window = s.getint("window", cfg.window)
    if len(cfg.seeds) != cfg.members:
        raise ConfigError(f"{cfg.members} members need {cfg.members} pretraining seeds, got {cfg.seeds}")
    noise = spec_from_config(p) if p.has_section("noise") else TrainConfig().noise
    train = {"noise": noise}
    pre_steps = joint_steps = None
    if p.has_section("train"):
        s = p["train"]
        _check_keys(s, ("patch", "batch", "steps", "pretrain_steps", "steps_per_epoch", "lr",
                        "lr_first", "lr_every", "beta1", "beta2", "eps", "lam", "loss", "seed"),
                    "train")
        if "patch" in s:
            train["patch"] = _ints(s["patch"])
        for key in ("batch", "steps_per_epoch", "lr_first", "lr_every", "seed"):
            if key in s:
                train[key] = s.getint(key)
        for key in ("lr", "beta1", "beta2", "eps", "lam"):
            if key in s:
                train[key] = s.getfloat(key)
        if "loss" in s:
            train["loss"] = s["loss"].strip()
        joint_steps = s.getint("steps", None)
        pre_steps = s.getint("pretrain_steps", None)
    base = TrainConfig(**train)
    cfg.joint = base if joint_steps is None else base.replace(steps=joint_steps)
    cfg.pretrain = base if pre_steps is None else base.replace(steps=pre_steps)
    return cfg


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_run_config(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None


def list_cubes(directory) -> list[str]:
    """Cube files (those with a ``.hdr`` sidecar) in a directory, sorted."""
    names = sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".hdr"))
    return [os.path.join(directory, n) for n in names if os.path.exists(os.path.join(directory, n))]
