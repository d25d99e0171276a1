"""Power scalability: how many denoisers run.

Training draws the number of active members ``N`` from
``P(N) = exp(lam * N) / sum_j exp(lam * j)`` for ``N = 1..D`` and then a
uniform subset of that size. Inference maps a power level to the first
``N`` members so their stream states stay warm.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .denoiser import ConfigError


def cardinality_pmf(lam: float, d_mix: int) -> np.ndarray:
    """``P(N)`` for ``N = 1..d_mix``, evaluated with a max shift in log space."""
    if d_mix < 1:
        raise ValueError("d_mix must be at least 1")
    logits = lam * np.arange(1, d_mix + 1, dtype=np.float64)
    w = np.exp(logits - logits.max())
    return w / w.sum()


@dataclass
class PowerPolicy:
    lam: float
    d_mix: int
    budget: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d_mix < 1:
            raise ConfigError("d_mix must be at least 1")

    def pmf(self) -> np.ndarray:
        return cardinality_pmf(self.lam, self.d_mix)


def sample_subset(policy: PowerPolicy, rng: np.random.Generator) -> tuple:
    """Sorted member ids: size from the pmf, identity uniform given the size."""
    n = int(rng.choice(policy.d_mix, p=policy.pmf())) + 1
    return tuple(sorted(int(i) for i in rng.choice(policy.d_mix, size=n, replace=False)))


def active_set_for_budget(policy: PowerPolicy, level) -> tuple:
    """First ``budget[level]`` member ids (capped at ``d_mix``)."""
    key = str(level)
    if key not in policy.budget:
        raise ConfigError(f"unknown power level {level!r}; known: {sorted(policy.budget)}")
    n = int(policy.budget[key])
    if n < 1:
        raise ConfigError(f"power level {level!r} allows {n} denoisers; at least one must run")
    return tuple(range(min(n, policy.d_mix)))


@dataclass(frozen=True)
class ScheduleEntry:
    start: int
    stop: int  # inclusive
    level: str


_ENTRY = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s+(\S+)\s*$")


def parse_schedule(text: str) -> list[ScheduleEntry]:
    """Budget schedule: one ``first-last level`` record per line (inclusive
    line indices, 0-based); ``#`` starts a comment. Ranges may not overlap."""
    entries = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0]
        if not line.strip():
            continue
        m = _ENTRY.match(line)
        if not m:
            raise ConfigError(f"schedule line {no}: expected 'first-last level', got {raw.strip()!r}")
        start, stop = int(m.group(1)), int(m.group(2))
        if stop < start:
            raise ConfigError(f"schedule line {no}: range {start}-{stop} is reversed")
        entries.append(ScheduleEntry(start, stop, m.group(3)))
    entries.sort(key=lambda e: e.start)
    for a, b in zip(entries, entries[1:]):
        if b.start <= a.stop:
            raise ConfigError(f"schedule ranges {a.start}-{a.stop} and {b.start}-{b.stop} overlap")
    return entries


def load_schedule(path) -> list[ScheduleEntry]:
    with open(path) as fh:
        return parse_schedule(fh.read())


def parse_budget(text: str) -> dict:
    """``level=count`` pairs separated by commas, e.g. ``low=1,mid=3,high=5``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep:
            raise ConfigError(f"budget entry {part!r} is not level=count")
        out[key.strip()] = int(val)
    return out


def active_trace(policy: PowerPolicy, schedule, n_lines: int) -> list[tuple]:
    """Active set for every line ``0..n_lines-1``; every line must be covered."""
    trace = [None] * n_lines
    for e in schedule:
        ids = active_set_for_budget(policy, e.level)
        for l in range(e.start, min(e.stop, n_lines - 1) + 1):
            trace[l] = ids
    missing = [l for l, t in enumerate(trace) if t is None]
    if missing:
        raise ConfigError(f"schedule does not cover line {missing[0]} ({len(missing)} lines uncovered)")
    return trace
