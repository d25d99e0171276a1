"""Mixture head: per-pixel self-attention across denoisers, fault filtering
on the attention diagonal, residual aggregation and noise subtraction.

For every pixel the ``D`` feature vectors are stacked into a ``D x F``
matrix ``H``; keys and queries ``K = H W_k``, ``Q = H W_q`` give the score
matrix ``A = softmax(K Q^T / sqrt(F))`` (row softmax). A denoiser whose
diagonal entry ``A_jj`` varies strongly across the pixels of a line is
declared faulty. The survivors are re-attended among themselves,
``z = A' (H' W_v) + H'``, averaged, projected to bands by a 1-D conv and
subtracted from the noisy line.
"""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .denoiser import Denoiser, DenoiserStream, FaultSuspected, denoiser_step, forward_image
from .layers import Conv1d, Linear, Module

log = logging.getLogger(__name__)


class AllFaultyError(RuntimeError):
    def __init__(self, report):
        super().__init__(f"all denoisers flagged faulty at line {report.line_index}")
        self.report = report


class Aggregator(Module):
    """Shared ``W_k, W_q, W_v`` (F x F) and the output conv F -> bands."""

    def __init__(self, features: int, bands: int, seed: int = 0, tau: float = 0.01,
                 out_kernel: int = 3):
        if tau <= 0:
            raise ValueError("fault threshold tau must be positive")
        rng = np.random.default_rng(seed)
        self.features, self.bands, self.tau = features, bands, tau
        self.out_kernel = out_kernel
        self.wk = Linear(features, features, rng, bias=False)
        self.wq = Linear(features, features, rng, bias=False)
        self.wv = Linear(features, features, rng, bias=False)
        self.out_conv = Conv1d(features, bands, out_kernel, rng)

    def attention(self, stack: Tensor) -> Tensor:
        """Row-softmax scores ``[..., N, D, D]`` for stacked features ``[..., N, D, F]``."""
        if stack.shape[-1] != self.features:
            raise ShapeError(f"aggregator: features {stack.shape[-1]} != {self.features}")
        k = self.wk(stack)
        q = self.wq(stack)
        scores = ad.matmul(k, ad.swapaxes(q, -1, -2)) * (1.0 / math.sqrt(self.features))
        return ad.softmax(scores, axis=-1)

    def head(self, y: Tensor, stack: Tensor) -> Tensor:
        """Denoised output for noisy ``y`` [..., N, B] and features [..., N, D, F]."""
        if y.shape[-1] != self.bands:
            raise ShapeError(f"aggregator: expected {self.bands} bands, got {y.shape}")
        a = self.attention(stack)
        z = ad.matmul(a, self.wv(stack)) + stack
        noise = self.out_conv(ad.mean(z, axis=-2))
        return y - noise

    def config(self) -> dict:
        return {"features": self.features, "bands": self.bands, "tau": self.tau,
                "out_kernel": self.out_kernel}


def stack_features(features) -> Tensor:
    feats = [f if isinstance(f, Tensor) else Tensor(f) for f in features]
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise ShapeError(f"feature maps differ in shape: {sorted(shapes)}")
    return ad.stack(feats, axis=-2)


def _diagonal(features, agg: Aggregator) -> np.ndarray:
    """``A_jj`` per pixel, ``[..., N, D]``, at the features' own precision."""
    with ad.no_grad(), np.errstate(over="ignore", invalid="ignore"):
        a = agg.attention(stack_features(features)).data
    return np.diagonal(a, axis1=-2, axis2=-1)


def _peak(h) -> float:
    return float(np.abs(h.data if isinstance(h, Tensor) else h).max())


def diagonal_variances(features, agg: Aggregator) -> np.ndarray:
    """Spatial variance of ``A_jj`` per line: ``[..., D]`` for features ``[..., N, F]`` each."""
    return _diagonal(features, agg).var(axis=-2)


@dataclass
class FaultReport:
    """Outcome of fault detection on one line; ids index the full mixture."""

    variances: dict
    verdicts: dict
    active: tuple
    line_index: int = -1

    @property
    def faulty(self) -> tuple:
        return tuple(i for i, v in self.verdicts.items() if v == "faulty")

    def log_records(self) -> list[str]:
        """One record per denoiser on lines with any fault event, else nothing."""
        if not self.faulty:
            return []
        return [f"line={self.line_index} denoiser={i} variance={self.variances[i]:.6g} "
                f"verdict={self.verdicts[i]}" for i in sorted(self.verdicts)]


def detect_faults(features, agg: Aggregator, tau: float | None = None, ids=None,
                  line_index: int = -1, history=None) -> FaultReport:
    """Flag denoisers by the spatial variance of their attention diagonal.

    ``features`` holds one ``[1, N, F]`` map per denoiser, or ``None`` for a
    denoiser that already failed. Non-finite maps are faulty before any
    attention is computed; the score matrix is formed over the remaining
    ones. If the scores themselves overflow, the member with the largest
    feature magnitude is flagged and the rest are scored again. ``history``
    (optional, ``{id: deque}``) pools the diagonals of the last few lines
    before taking the variance.
    """
    tau = agg.tau if tau is None else tau
    ids = list(range(len(features))) if ids is None else list(ids)
    if not features:
        raise ValueError("detect_faults needs at least one feature map")
    variances, verdicts = {}, {}
    finite = []
    for i, h in zip(ids, features):
        if h is None or not np.isfinite(h.data if isinstance(h, Tensor) else h).all():
            variances[i], verdicts[i] = math.inf, "faulty"
        else:
            finite.append((i, h))
    diag = None
    while finite and diag is None:
        try:
            diag = _diagonal([h for _, h in finite], agg).reshape(-1, len(finite))  # [N, D']
        except ad.NumericError:
            # finite but huge features overflow the scores: the largest one is the suspect
            worst = max(range(len(finite)), key=lambda j: _peak(finite[j][1]))
            i, _ = finite.pop(worst)
            variances[i], verdicts[i] = math.inf, "faulty"
    if finite:
        for j, (i, _) in enumerate(finite):
            values = diag[:, j]
            if history is not None:
                history[i].append(values)
                values = np.concatenate(list(history[i]))
            var = float(values.var())
            variances[i] = var
            verdicts[i] = "faulty" if var > tau else "ok"
    report = FaultReport(variances, verdicts,
                         tuple(i for i in ids if verdicts[i] == "ok"), line_index)
    if not report.active:
        raise AllFaultyError(report)
    return report


def aggregate_line(y_line, features, report: FaultReport, agg: Aggregator, ids=None) -> np.ndarray:
    """Denoised line from the denoisers listed in ``report.active`` only."""
    ids = list(range(len(features))) if ids is None else list(ids)
    if not report.active:
        raise AllFaultyError(report)
    by_id = dict(zip(ids, features))
    stack = stack_features([by_id[i] for i in report.active])
    y = y_line if isinstance(y_line, Tensor) else Tensor(y_line, dtype=stack.dtype)
    with ad.no_grad():
        return agg.head(y, stack).data


class Mixture:
    """``D`` denoisers sharing an aggregator."""

    def __init__(self, denoisers: list[Denoiser], aggregator: Aggregator):
        if not denoisers:
            raise ValueError("a mixture needs at least one denoiser")
        self.denoisers = list(denoisers)
        self.aggregator = aggregator

    @property
    def size(self) -> int:
        return len(self.denoisers)

    def astype(self, dtype) -> "Mixture":
        for d in self.denoisers:
            d.astype(dtype)
        self.aggregator.astype(dtype)
        return self

    def forward_batch(self, y: Tensor, active) -> Tensor:
        """Differentiable output for a stack of lines using members ``active``."""
        stack = ad.stack([self.denoisers[i](y) for i in active], axis=-2)
        return self.aggregator.head(y, stack)

    def denoise_image(self, cube: np.ndarray, active=None, filter_faults: bool = True):
        """Whole-image inference with per-line fault detection.

        Features are computed in batch mode (equal to streaming up to
        rounding). Returns ``(output cube, list of FaultReport)``.
        """
        active = tuple(range(self.size)) if active is None else tuple(active)
        feats = {}
        for i in active:
            try:
                feats[i] = forward_image(self.denoisers[i], cube)
            except FaultSuspected:
                feats[i] = None
        out = np.empty(cube.shape, dtype=self.aggregator.out_conv.weight.dtype)
        reports = []
        for l in range(cube.shape[0]):
            line_feats = [None if feats[i] is None else feats[i][l:l + 1] for i in active]
            out[l:l + 1], rep = self._finish_line(cube[l:l + 1], line_feats, active, l, filter_faults)
            reports.append(rep)
        return out, reports

    def _finish_line(self, y_line, line_feats, active, line_index, filter_faults, history=None):
        agg = self.aggregator
        if filter_faults:
            try:
                report = detect_faults(line_feats, agg, ids=active, line_index=line_index,
                                       history=history)
            except AllFaultyError as exc:
                log.warning("line %d: all denoisers faulty, passing the noisy line through", line_index)
                return np.asarray(y_line, dtype=agg.out_conv.weight.dtype), exc.report
        else:
            report = FaultReport({i: math.nan for i in active}, {i: "ok" for i in active},
                                 tuple(active), line_index)
            if any(f is None for f in line_feats):
                # an unfiltered mixture has nothing sensible to emit
                return np.full(np.shape(y_line), np.nan), report
        for rec in report.log_records():
            log.info("fault %s", rec)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                return aggregate_line(y_line, line_feats, report, agg, ids=active), report
            except ad.NumericError:
                return np.full(np.shape(y_line), np.nan), report


@dataclass
class MixtureStream:
    """Line-by-line inference over a :class:`Mixture`.

    Only active members are advanced. A member that is switched on mid-image
    starts from a zero state unless ``allow_switch`` is False, in which case
    changing the active set after the first line is an error.
    """

    mixture: Mixture
    n_cols: int
    active: tuple = None
    filter_faults: bool = True
    threads: int = 1
    window: int = 1
    allow_switch: bool = True
    dtype: object = None
    streams: list = field(init=False)
    line_index: int = field(init=False, default=0)

    def __post_init__(self):
        self.streams = [DenoiserStream(d, self.n_cols, self.dtype) for d in self.mixture.denoisers]
        self.active = tuple(range(self.mixture.size)) if self.active is None else tuple(self.active)
        self._history = self._new_history()
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def _new_history(self):
        if self.window <= 1:
            return None
        return {i: deque(maxlen=self.window) for i in range(self.mixture.size)}

    @property
    def state_nbytes(self) -> int:
        return sum(s.nbytes for s in self.streams)

    def set_active(self, active) -> None:
        active = tuple(sorted(active))
        if not active:
            raise ValueError("at least one denoiser must stay active")
        if active == self.active:
            return
        if not self.allow_switch and self.line_index > 0:
            raise RuntimeError("active set changed mid-image while switching is disabled")
        for i in set(active) - set(self.active):
            self.streams[i].reset()
        self.active = active
        self._history = self._new_history()

    def _run(self, i, y_line):
        try:
            return denoiser_step(self.streams[i], y_line)
        except FaultSuspected:
            return None

    def step(self, y_line: np.ndarray):
        """Denoise one ``[1, N, bands]`` line; returns ``(line, FaultReport)``."""
        y_line = np.asarray(y_line)
        if self._pool is not None:
            feats = list(self._pool.map(lambda i: self._run(i, y_line), self.active))
        else:
            feats = [self._run(i, y_line) for i in self.active]
        out, report = self.mixture._finish_line(y_line, feats, self.active, self.line_index,
                                                self.filter_faults, self._history)
        self.line_index += 1
        return out, report

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


def auc(positive, negative) -> float:
    """Probability that a positive score exceeds a negative one (ties count half)."""
    pos = np.asarray(positive, dtype=float)
    neg = np.asarray(negative, dtype=float)
    if pos.size == 0 or neg.size == 0:
        return math.nan
    pos = np.where(np.isnan(pos), np.inf, pos)
    greater = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((greater + 0.5 * ties) / (pos.size * neg.size))


@dataclass
class VarianceStudy:
    probability: float
    faulty: np.ndarray
    nominal: np.ndarray

    @property
    def auc(self) -> float:
        return auc(self.faulty, self.nominal)


def variance_statistics(mixture: Mixture, images, probabilities, trials: int = 30,
                        model: str = "bitflip-msb", seed: int = 0, scale_to: int | None = 817_920,
                        dtype=np.float32) -> list[VarianceStudy]:
    """Diagonal-variance distributions of faulty vs. fault-free denoisers.

    For each probability and trial every denoiser gets independent weight
    faults; its statistic on an image is the mean over lines of the per-line
    diagonal variance. A denoiser counts as faulty when its manifest is not
    empty. Trials share their random draws across probabilities, so a
    denoiser's fault set can only grow with the probability. With
    ``scale_to`` set, probabilities are rescaled so the expected number of
    faults matches a denoiser with that many weights.
    """
    from .faults import FaultSpec, inject

    n_weights = mixture.denoisers[0].num_weights()
    studies = []
    for p in probabilities:
        p_eff = min(1.0, p * scale_to / n_weights) if scale_to else p
        faulty, nominal = [], []
        for t in range(trials):
            members, flags = [], []
            for d, den in enumerate(mixture.denoisers):
                spec = FaultSpec(p_eff, model=model, seed=seed * 1_000_003 + t * 101 + d)
                bad, manifest = inject(den, spec)
                bad.astype(dtype)
                members.append(bad)
                flags.append(bool(manifest.records))
            agg = cast_aggregator(mixture.aggregator, dtype)
            for cube in images:
                stats = _image_diag_variance(members, agg, cube)
                for d, flag in enumerate(flags):
                    (faulty if flag else nominal).append(stats[d])
        studies.append(VarianceStudy(p, np.array(faulty), np.array(nominal)))
    return studies


def cast_aggregator(agg: Aggregator, dtype) -> Aggregator:
    clone = Aggregator(agg.features, agg.bands, tau=agg.tau, out_kernel=agg.out_kernel)
    clone.load_state_dict(agg.state_dict())
    clone.astype(dtype)
    return clone


def _image_diag_variance(members, agg, cube) -> np.ndarray:
    """Mean over lines of the per-line diagonal variance, per member.

    Lines go through :func:`detect_faults`, so a member whose features are
    non-finite or overflow the scores counts as ``inf`` while the others are
    scored among themselves.
    """
    feats = []
    for den in members:
        try:
            feats.append(forward_image(den, cube))
        except FaultSuspected:
            feats.append(None)
    per_line = np.empty((cube.shape[0], len(members)))
    for l in range(cube.shape[0]):
        line = [None if f is None else f[l:l + 1] for f in feats]
        try:
            report = detect_faults(line, agg, tau=math.inf)
        except AllFaultyError as exc:
            report = exc.report
        per_line[l] = [report.variances[i] for i in range(len(members))]
    return per_line.mean(axis=0)
