"""Training: Adam, the step-decay schedule, denoiser pretraining, joint
mixture training with random member subsets, checkpoints and eval logs.

Training runs in 64-bit and uses the batch scan over whole patches.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import pack, unpack
from .data import sample_patches
from .denoiser import Denoiser, DenoiserConfig
from .layers import Conv1d, Linear, Module
from .metrics import quality
from .mixture import Aggregator, Mixture
from .noise import NoiseSpec, add_noise
from .power import PowerPolicy, sample_subset

CKPT_MAGIC = b"PBCK"
CKPT_VERSION = 1


class DivergenceError(RuntimeError):
    pass


def lr_at(epoch: int, base: float = 5e-4, first: int = 30, every: int = 100) -> float:
    """``base`` halved at epoch ``first`` and again every ``every`` epochs after."""
    if epoch < first:
        return base
    return base * 0.5 ** (1 + (epoch - first) // every)


@dataclass
class TrainConfig:
    patch: tuple = (64, 64)
    batch: int = 4
    steps: int = 1000
    steps_per_epoch: int = 100
    lr: float = 5e-4
    lr_first: int = 30
    lr_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 0.0
    loss: str = "mse"
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(sigma=(0.0, 25.0)))
    seed: int = 0

    def __post_init__(self):
        self.patch = tuple(int(p) for p in self.patch)
        if self.loss not in ("mse", "l1"):
            raise ValueError(f"loss must be 'mse' or 'l1', got {self.loss!r}")
        if self.batch < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch and steps_per_epoch must be positive")

    def lr_for_step(self, step: int) -> float:
        return lr_at(step // self.steps_per_epoch, self.lr, self.lr_first, self.lr_every)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["patch"] = list(self.patch)
        d["noise"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["noise"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["noise"] = NoiseSpec(**d["noise"])
        return cls(**d)


class Adam:
    """Adam with a step counter per parameter, so members that sit out a
    step keep both their values and their bias correction untouched."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t: dict = {}

    def step(self, named_params, grads: dict, lr: float) -> None:
        b1, b2 = self.beta1, self.beta2
        for name, p in named_params:
            g = grads[p.id]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** t)
            vhat = self.v[name] / (1 - b2 ** t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def arrays(self) -> dict:
        out = {}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load(self, arrays: dict, counters: dict) -> None:
        self.t = {k: int(v) for k, v in counters.items()}
        self.m = {k: arrays[f"m/{k}"].copy() for k in self.t}
        self.v = {k: arrays[f"v/{k}"].copy() for k in self.t}


def _loss(pred: Tensor, target: np.ndarray, kind: str) -> Tensor:
    diff = pred - Tensor(target)
    if kind == "l1":
        return ad.mean(ad.relu(diff) + ad.relu(-diff))
    return ad.mean(ad.square(diff))


class Trainer:
    """Optimisation loop shared by pretraining and joint training.

    ``phase="pretrain"`` trains ``denoisers[0]`` with a temporary linear
    head ``F -> bands`` (output ``y - head(h)``). ``phase="joint"`` trains
    the mixture; every step draws the active members from the power pmf and
    only those members and the aggregator are updated.
    """

    def __init__(self, config: TrainConfig, cubes, denoisers, aggregator=None,
                 phase: str = "joint", head: Linear | None = None):
        if phase not in ("pretrain", "joint"):
            raise ValueError(f"unknown phase {phase!r}")
        self.config = config
        self.cubes = cubes
        self.phase = phase
        self.denoisers = list(denoisers)
        bands = self.denoisers[0].config.bands
        feats = self.denoisers[0].config.features
        rng = np.random.default_rng(config.seed)
        if phase == "pretrain":
            self.head = head or Linear(feats, bands, np.random.default_rng(config.seed + 7919))
            self.aggregator = None
        else:
            self.head = None
            self.aggregator = aggregator or Aggregator(feats, bands, seed=config.seed)
            self.mixture = Mixture(self.denoisers, self.aggregator)
            self.policy = PowerPolicy(config.lam, len(self.denoisers))
        self.rng = rng
        self.adam = Adam(config.beta1, config.beta2, config.eps)
        self.step_count = 0
        self.history: list[float] = []

    # -------------------------------------------------------------- modules
    def modules(self) -> dict:
        mods = {f"d{i}": d for i, d in enumerate(self.denoisers)}
        if self.head is not None:
            mods["head"] = self.head
        if self.aggregator is not None:
            mods["aggregator"] = self.aggregator
        return mods

    def _named(self, keys):
        mods = self.modules()
        return [(f"{k}.{n}", p) for k in keys for n, p in mods[k].named_parameters()]

    # --------------------------------------------------------------- step
    def next_batch(self):
        c = self.config
        clean = sample_patches(self.cubes, self.rng, c.batch, *c.patch)
        seeds = self.rng.integers(0, 2 ** 63, size=c.batch)
        noisy = np.stack([add_noise(x, c.noise.replace(seed=int(s))) for x, s in zip(clean, seeds)])
        return clean, noisy

    def step(self) -> float:
        clean, noisy = self.next_batch()
        y = Tensor(noisy)
        try:
            if self.phase == "pretrain":
                keys = ["d0", "head"]
                pred = y - self.head(self.denoisers[0](y))
            else:
                active = sample_subset(self.policy, self.rng)
                keys = [f"d{i}" for i in active] + ["aggregator"]
                pred = self.mixture.forward_batch(y, active)
            loss = _loss(pred, clean, self.config.loss)
        except ad.NumericError as exc:
            raise DivergenceError(f"non-finite values at step {self.step_count} ({self.phase}): {exc}") from exc
        value = float(loss.data)
        if not math.isfinite(value):
            raise DivergenceError(f"loss became {value} at step {self.step_count} ({self.phase})")
        named = self._named(keys)
        grads = ad.backward(loss, [p for _, p in named])
        self.adam.step(named, grads, self.config.lr_for_step(self.step_count))
        self.step_count += 1
        self.history.append(value)
        return value

    def run(self, steps: int | None = None, callback=None) -> list[float]:
        steps = self.config.steps - self.step_count if steps is None else steps
        out = []
        for _ in range(steps):
            out.append(self.step())
            if callback is not None:
                callback(self)
        return out

    # ---------------------------------------------------------- checkpoint
    def checkpoint(self) -> bytes:
        arrays = {}
        for key, mod in self.modules().items():
            for n, a in mod.state_dict().items():
                arrays[f"param/{key}.{n}"] = a
        for n, a in self.adam.arrays().items():
            arrays[f"adam/{n}"] = a
        meta = {
            "phase": self.phase,
            "step": self.step_count,
            "train": self.config.to_dict(),
            "denoisers": [d.config.to_dict() for d in self.denoisers],
            "aggregator": None if self.aggregator is None else self.aggregator.config(),
            "adam_t": self.adam.t,
            "rng": self.rng.bit_generator.state,
            "history": self.history,
        }
        return pack(CKPT_MAGIC, CKPT_VERSION, meta, arrays)

    @classmethod
    def from_checkpoint(cls, blob: bytes, cubes) -> "Trainer":
        meta, arrays = unpack(blob, CKPT_MAGIC, CKPT_VERSION)
        config = TrainConfig.from_dict(meta["train"])
        dens = [Denoiser(DenoiserConfig.from_dict(d)) for d in meta["denoisers"]]
        agg = Aggregator(**meta["aggregator"]) if meta["aggregator"] else None
        trainer = cls(config, cubes, dens, agg, phase=meta["phase"])
        for key, mod in trainer.modules().items():
            prefix = f"param/{key}."
            mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        trainer.adam.load({k[5:]: v for k, v in arrays.items() if k.startswith("adam/")}, meta["adam_t"])
        trainer.rng.bit_generator.state = meta["rng"]
        trainer.step_count = meta["step"]
        trainer.history = list(meta["history"])
        return trainer


def load_mixture(blob: bytes) -> Mixture:
    """The mixture stored in a joint-phase checkpoint."""
    meta, arrays = unpack(blob, CKPT_MAGIC, CKPT_VERSION)
    if meta["phase"] != "joint":
        raise ValueError("checkpoint holds a pretraining run, not a mixture")
    dens = [Denoiser(DenoiserConfig.from_dict(d)) for d in meta["denoisers"]]
    agg = Aggregator(**meta["aggregator"])
    mods = {f"d{i}": d for i, d in enumerate(dens)}
    mods["aggregator"] = agg
    for key, mod in mods.items():
        prefix = f"param/{key}."
        mod.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
    return Mixture(dens, agg)


def load_pretrained(blob: bytes) -> Denoiser:
    """The member stored in a pretraining checkpoint (its head is dropped)."""
    meta, arrays = unpack(blob, CKPT_MAGIC, CKPT_VERSION)
    if meta["phase"] != "pretrain":
        raise ValueError("checkpoint does not hold a pretraining run")
    den = Denoiser(DenoiserConfig.from_dict(meta["denoisers"][0]))
    den.load_state_dict({k[len("param/d0."):]: v for k, v in arrays.items()
                         if k.startswith("param/d0.")})
    return den


def save_mixture(mixture: Mixture, train: TrainConfig | None = None) -> bytes:
    """Joint-phase checkpoint of a mixture without optimiser state."""
    t = Trainer(train or TrainConfig(), [], mixture.denoisers, mixture.aggregator)
    return t.checkpoint()


def pretrain_denoiser(seed: int, config: DenoiserConfig, train: TrainConfig, cubes) -> Denoiser:
    """One denoiser trained alone on noise regression; the head is dropped."""
    den = Denoiser(config.replace(seed=seed))
    trainer = Trainer(train.replace(seed=seed), cubes, [den], phase="pretrain")
    trainer.run()
    return den


def train_mixture(pretrained, train: TrainConfig, cubes, aggregator: Aggregator | None = None):
    """Joint training; returns ``(mixture, per-step losses)``."""
    trainer = Trainer(train, cubes, pretrained, aggregator, phase="joint")
    losses = trainer.run()
    return trainer.mixture, losses


# ----------------------------------------------------------------- evaluation

def evaluate(mixture: Mixture, clean_cubes, noisy_cubes, active=None) -> dict:
    """Mean PSNR/SSIM/SAM of the mixture output over a set of cubes."""
    reports = []
    for x, y in zip(clean_cubes, noisy_cubes):
        out, _ = mixture.denoise_image(y, active=active, filter_faults=False)
        reports.append(quality(x, out))
    return {"psnr": float(np.mean([r.psnr for r in reports])),
            "ssim": float(np.mean([r.ssim for r in reports])),
            "sam": float(np.mean([r.sam for r in reports]))}


def metrics_record(epoch: int, active: int, scores: dict) -> str:
    return f"{epoch},{active},{scores['psnr']:.4f},{scores['ssim']:.6f},{scores['sam']:.6f}"


METRICS_HEADER = "epoch,active,psnr,ssim,sam"


# ------------------------------------------------------------------- baseline

class ConvBaseline(Module):
    """Plain three-layer 1-D conv residual denoiser (bands -> F -> F -> bands)."""

    def __init__(self, bands: int, features: int = 32, kernel: int = 3, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.c1 = Conv1d(bands, features, kernel, rng)
        self.c2 = Conv1d(features, features, kernel, rng)
        self.c3 = Conv1d(features, bands, kernel, rng)

    def __call__(self, y: Tensor) -> Tensor:
        return y - self.c3(ad.relu(self.c2(ad.relu(self.c1(y)))))


def train_baseline(model: ConvBaseline, train: TrainConfig, cubes) -> list[float]:
    rng = np.random.default_rng(train.seed)
    adam = Adam(train.beta1, train.beta2, train.eps)
    named = model.named_parameters()
    losses = []
    for step in range(train.steps):
        clean = sample_patches(cubes, rng, train.batch, *train.patch)
        seeds = rng.integers(0, 2 ** 63, size=train.batch)
        noisy = np.stack([add_noise(x, train.noise.replace(seed=int(s))) for x, s in zip(clean, seeds)])
        loss = _loss(model(Tensor(noisy)), clean, train.loss)
        grads = ad.backward(loss, [p for _, p in named])
        adam.step(named, grads, train.lr_for_step(step))
        losses.append(float(loss.data))
    return losses


def baseline_output(model: ConvBaseline, cube: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model(Tensor(cube)).data
