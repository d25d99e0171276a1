"""Desk-scale studies: streaming latency, state memory, fault detection and
power scalability. Each returns plain records that the CLI prints as tables.
"""
from __future__ import annotations

import itertools
import math
import resource
import time
from dataclasses import dataclass

import numpy as np

from .denoiser import Denoiser, DenoiserStream, denoiser_step
from .faults import FaultSpec, inject
from .metrics import psnr
from .mixture import Mixture, MixtureStream, cast_aggregator, variance_statistics

LINE_TIME_MS = 4.34  # line acquisition time of the PRISMA imager


@dataclass
class BenchReport:
    lines: int
    cols: int
    bands: int
    members: int
    mean_ms: float
    p95_ms: float
    state_bytes_early: int
    state_bytes_final: int
    peak_rss_mb: float

    @property
    def within_budget(self) -> bool:
        return self.mean_ms <= LINE_TIME_MS

    def table(self) -> str:
        verdict = "within" if self.within_budget else "over"
        return "\n".join([
            f"lines={self.lines} cols={self.cols} bands={self.bands} members={self.members}",
            f"mean_ms={self.mean_ms:.3f} p95_ms={self.p95_ms:.3f}",
            f"reference_ms={LINE_TIME_MS} verdict={verdict} (informational)",
            f"state_bytes_line10={self.state_bytes_early} state_bytes_final={self.state_bytes_final}",
            f"peak_rss_mb={self.peak_rss_mb:.1f}",
        ])


def peak_rss_mb() -> float:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def bench(mixture: Mixture, cols: int, lines: int, dtype=np.float32, threads: int = 1,
          seed: int = 0, warmup: int = 1, probe_line: int = 10) -> BenchReport:
    """Stream ``lines`` synthetic lines through the whole mixture and time each."""
    bands = mixture.aggregator.bands
    mixture.astype(dtype)
    rng = np.random.default_rng(seed)
    stream = MixtureStream(mixture, cols, threads=threads, dtype=dtype)
    line = rng.uniform(0.05, 0.95, size=(1, cols, bands)).astype(dtype)
    for _ in range(warmup):
        stream.step(line)
    stream = MixtureStream(mixture, cols, threads=threads, dtype=dtype)
    times, early = [], None
    for l in range(lines):
        line = rng.uniform(0.05, 0.95, size=(1, cols, bands)).astype(dtype)
        t0 = time.perf_counter()
        stream.step(line)
        times.append((time.perf_counter() - t0) * 1e3)
        if l + 1 == min(probe_line, lines):
            early = stream.state_nbytes
    stream.close()
    return BenchReport(lines, cols, bands, mixture.size, float(np.mean(times)),
                       float(np.percentile(times, 95)), early, stream.state_nbytes, peak_rss_mb())


@dataclass
class MemoryReport:
    lines: int
    bytes_at_probe: int
    bytes_final: int
    peak_rss_mb: float

    @property
    def constant(self) -> bool:
        return self.bytes_at_probe == self.bytes_final


def memory_probe(denoiser: Denoiser, cols: int, lines: int, probe_line: int = 10,
                 dtype=np.float32, seed: int = 0) -> MemoryReport:
    """StreamState size after ``probe_line`` lines and after ``lines`` lines."""
    rng = np.random.default_rng(seed)
    stream = DenoiserStream(denoiser, cols, dtype)
    bands = denoiser.config.bands
    at_probe = None
    for l in range(lines):
        denoiser_step(stream, rng.uniform(0, 1, size=(1, cols, bands)).astype(dtype))
        if l + 1 == probe_line:
            at_probe = stream.nbytes
    if at_probe is None:
        at_probe = stream.nbytes
    return MemoryReport(lines, at_probe, stream.nbytes, peak_rss_mb())


# ------------------------------------------------------------------ faults

@dataclass
class RateRow:
    probability: float
    tau: float
    tpr: float
    fpr: float
    auc: float
    n_faulty: int
    n_nominal: int


def fault_study(mixture: Mixture, images, probabilities, trials: int = 30,
                taus=(0.001, 0.005, 0.01, 0.02, 0.05), model: str = "bitflip-msb",
                seed: int = 0, scale_to: int | None = 817_920):
    """Variance distributions per probability plus a TPR/FPR table over ``taus``."""
    studies = variance_statistics(mixture, images, probabilities, trials=trials, model=model,
                                  seed=seed, scale_to=scale_to)
    rows = []
    for st in studies:
        for tau in taus:
            tpr = float(np.mean(st.faulty > tau)) if st.faulty.size else math.nan
            fpr = float(np.mean(st.nominal > tau)) if st.nominal.size else math.nan
            rows.append(RateRow(st.probability, tau, tpr, fpr, st.auc, st.faulty.size, st.nominal.size))
    return studies, rows


def _line_psnr(clean_line, out_line) -> float:
    if not np.isfinite(out_line).all():
        return -math.inf
    return psnr(clean_line, out_line)


@dataclass
class SingleFaultTrial:
    denoiser: int
    weight: int
    old: float
    new: float
    weight_std: float
    detected_lines: int
    false_alarm_lines: int
    nominal_lines: int
    lines: int
    filtered_psnr: np.ndarray
    unfiltered_psnr: np.ndarray


def single_fault_trials(mixture: Mixture, clean, noisy, trials: int = 100, seed: int = 0,
                        dtype=np.float32, tau: float | None = None):
    """One bitflip in one random weight of one random member per trial.

    Per line the filtered mixture (fault detection on) and the unfiltered
    one (all members used) are scored against the clean cube.
    """
    rng = np.random.default_rng(seed)
    base = [d.copy() for d in mixture.denoisers]
    for d in base:
        d.astype(dtype)
    agg = cast_aggregator(mixture.aggregator, dtype)
    if tau is not None:
        agg.tau = tau
    out = []
    for _ in range(trials):
        d = int(rng.integers(mixture.size))
        n = base[d].num_weights()
        wid = int(rng.integers(n))
        u = np.ones(n)
        u[wid] = 0.0  # hit exactly this weight
        bad, manifest = inject(base[d], FaultSpec(1e-12, "bitflip-msb"), uniforms=u)
        bad.astype(dtype)
        members = list(base)
        members[d] = bad
        trial_mix = Mixture(members, agg)
        filt, reports = trial_mix.denoise_image(noisy, filter_faults=True)
        raw, _ = trial_mix.denoise_image(noisy, filter_faults=False)
        detected = sum(r.verdicts[d] == "faulty" for r in reports)
        false_alarm = sum(r.verdicts[j] == "faulty" for r in reports for j in r.verdicts if j != d)
        table = {off: t for _, t, off in base[d].weight_table()}
        offs = np.array(sorted(table))
        std = float(table[offs[np.searchsorted(offs, wid, side="right") - 1]].data.std())
        _, old, new = manifest.records[0]
        lines = noisy.shape[0]
        out.append(SingleFaultTrial(
            d, wid, old, new, std, detected, false_alarm, lines * (mixture.size - 1), lines,
            np.array([_line_psnr(clean[l], filt[l]) for l in range(lines)]),
            np.array([_line_psnr(clean[l], raw[l]) for l in range(lines)])))
    return out


# ------------------------------------------------------------------- power

@dataclass
class PowerRow:
    lam: float
    active: int
    psnr_mean: float
    psnr_std: float
    subsets: int


def subset_psnr(mixture: Mixture, clean_cubes, noisy_cubes, active) -> float:
    scores = []
    for x, y in zip(clean_cubes, noisy_cubes):
        out, _ = mixture.denoise_image(y, active=active, filter_faults=False)
        scores.append(psnr(x, out))
    return float(np.mean(scores))


def power_curve(mixture: Mixture, clean_cubes, noisy_cubes, lam: float = math.nan):
    """PSNR per active count, averaged over every subset of that size."""
    rows = []
    for n in range(1, mixture.size + 1):
        vals = [subset_psnr(mixture, clean_cubes, noisy_cubes, s)
                for s in itertools.combinations(range(mixture.size), n)]
        rows.append(PowerRow(lam, n, float(np.mean(vals)), float(np.std(vals)), len(vals)))
    return rows

