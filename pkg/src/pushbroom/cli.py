"""``pushbroom`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from . import experiments as ex
from .container import FormatError
from .data import synth_cube, synth_set
from .denoiser import ConfigError, Denoiser, DenoiserConfig
from .faults import MODELS, FaultSpec, inject, write_manifest
from .io import (HeaderError, LineReader, LineWriter, list_cubes, load_run_config, read_cube,
                 write_cube)
from .metrics import quality
from .mixture import Aggregator, Mixture, MixtureStream
from .noise import NoiseSpec, add_noise, load_spec
from .power import PowerPolicy, active_trace, load_schedule, parse_budget
from .train import (METRICS_HEADER, Trainer, evaluate, load_mixture, load_pretrained,
                    metrics_record)

log = logging.getLogger("pushbroom")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def _write(path, blob: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(blob)


def _training_cubes(args, bands: int) -> list[np.ndarray]:
    if args.data:
        paths = list_cubes(args.data)
        if not paths:
            raise UsageError(f"no cube files (with .hdr sidecars) in {args.data}")
        cubes = [read_cube(p).astype(np.float64) for p in paths]
        if any(c.shape[2] != bands for c in cubes):
            raise ConfigError(f"training cubes must have {bands} bands")
        return [np.clip(c, 0.0, 1.0) for c in cubes]
    return synth_set(args.synth_count, args.synth_size, args.synth_size, bands, seed=args.synth_seed)


# ------------------------------------------------------------------ commands

def cmd_synth(args):
    write_cube(args.out, synth_cube(args.lines, args.cols, args.bands, args.seed))


def cmd_noise(args):
    spec = load_spec(args.spec) if args.spec else NoiseSpec()
    if args.seed is not None:
        spec = spec.replace(seed=args.seed)
    write_cube(args.out, add_noise(read_cube(args.inp), spec))


def cmd_pretrain(args):
    cfg = load_run_config(args.config)
    cubes = _training_cubes(args, cfg.denoiser.bands)
    den = Denoiser(cfg.denoiser.replace(seed=args.seed))
    trainer = Trainer(cfg.pretrain.replace(seed=args.seed), cubes, [den], phase="pretrain")
    trainer.run()
    _write(args.out, trainer.checkpoint())
    print(f"pretrained seed={args.seed} steps={trainer.step_count} loss={trainer.history[-1]:.6g}")


def cmd_train(args):
    cfg = load_run_config(args.config)
    cubes = _training_cubes(args, cfg.denoiser.bands)
    if args.resume:
        trainer = Trainer.from_checkpoint(_read(args.resume), cubes)
    else:
        if args.pretrained:
            if len(args.pretrained) != cfg.members:
                raise UsageError(f"--pretrained needs {cfg.members} checkpoints")
            dens = [load_pretrained(_read(p)) for p in args.pretrained]
        else:
            dens = []
            for s in cfg.seeds:
                t = Trainer(cfg.pretrain.replace(seed=s), cubes,
                            [Denoiser(cfg.denoiser.replace(seed=s))], phase="pretrain")
                t.run()
                dens.append(t.denoisers[0])
                print(f"pretrained member seed={s} loss={t.history[-1]:.6g}")
        agg = Aggregator(cfg.denoiser.features, cfg.denoiser.bands, seed=cfg.joint.seed, tau=cfg.tau)
        trainer = Trainer(cfg.joint, cubes, dens, agg, phase="joint")
    metrics = open(args.metrics, "w") if args.metrics else None
    val = None
    if metrics:
        metrics.write(METRICS_HEADER + "\n")
        clean = synth_set(2, 64, 64, cfg.denoiser.bands, seed=10_007)
        val = (clean, [add_noise(x, cfg.joint.noise.replace(seed=i)) for i, x in enumerate(clean)])

    def log_eval(t):
        if metrics and t.step_count % (t.config.steps_per_epoch * args.eval_every) == 0:
            epoch = t.step_count // t.config.steps_per_epoch
            for n in range(1, t.mixture.size + 1):
                scores = evaluate(t.mixture, *val, active=tuple(range(n)))
                metrics.write(metrics_record(epoch, n, scores) + "\n")
            metrics.flush()

    try:
        trainer.run(callback=log_eval)
    finally:
        if metrics:
            metrics.close()
    _write(args.out, trainer.checkpoint())
    print(f"trained steps={trainer.step_count} loss={trainer.history[-1]:.6g}")


def _policy_for(args, members: int) -> PowerPolicy:
    budget = {str(n): n for n in range(1, members + 1)}
    if args.budget_map:
        budget.update(parse_budget(args.budget_map))
    return PowerPolicy(0.0, members, budget)


def cmd_denoise(args):
    mixture = load_mixture(_read(args.ckpt))
    dtype = np.dtype(args.precision)
    if args.tau is not None:
        if args.tau <= 0:
            raise UsageError("--tau must be positive")
        mixture.aggregator.tau = args.tau
    if args.fault_prob:
        corrupted = []
        for d, den in enumerate(mixture.denoisers):
            spec = FaultSpec(args.fault_prob, model=args.fault_model, seed=args.fault_seed + d)
            bad, manifest = inject(den, spec)
            corrupted.append(bad)
            if args.fault_manifest:
                write_manifest(f"{args.fault_manifest}.{d}", manifest)
        mixture = Mixture(corrupted, mixture.aggregator)
    mixture.astype(dtype)
    reader = LineReader(args.inp)
    hdr = reader.header
    if hdr.bands != mixture.aggregator.bands:
        raise ConfigError(f"input has {hdr.bands} bands but the model expects {mixture.aggregator.bands}")
    if args.budget:
        trace = active_trace(_policy_for(args, mixture.size), load_schedule(args.budget), hdr.lines)
    else:
        n = args.active or mixture.size
        if not 1 <= n <= mixture.size:
            raise UsageError(f"--active must be between 1 and {mixture.size}")
        trace = [tuple(range(n))] * hdr.lines
    stream = MixtureStream(mixture, hdr.columns, active=trace[0] if trace else None,
                           filter_faults=not args.no_filter, threads=args.threads,
                           window=args.window, dtype=dtype)
    fault_log = open(args.fault_log, "w") if args.fault_log else None
    events = 0
    try:
        with reader, LineWriter(args.out, hdr.columns, hdr.bands) as writer:
            for l, line in enumerate(reader):
                stream.set_active(trace[l])
                out, report = stream.step(line)
                writer.write_line(out)
                records = report.log_records()
                events += bool(records)
                if fault_log:
                    for rec in records:
                        fault_log.write(rec + "\n")
    finally:
        stream.close()
        if fault_log:
            fault_log.close()
    print(f"denoised lines={hdr.lines} fault_lines={events} max_buffered_lines={reader.max_buffered}")


def cmd_eval(args):
    report = quality(read_cube(args.clean), read_cube(args.test), peak=args.peak)
    print(report.as_row())


def _bench_mixture(args) -> Mixture:
    if args.ckpt:
        return load_mixture(_read(args.ckpt))
    cfg = DenoiserConfig(bands=args.bands, features=args.features)
    dens = [Denoiser(cfg.replace(seed=s)) for s in range(args.members)]
    return Mixture(dens, Aggregator(args.features, args.bands))


def cmd_bench(args):
    mixture = _bench_mixture(args)
    report = ex.bench(mixture, args.cols, args.lines, dtype=np.dtype(args.precision),
                      threads=args.threads)
    print(report.table())


def _study_images(args, bands: int):
    if args.images:
        clean = [np.clip(read_cube(p).astype(np.float64), 0, 1) for p in args.images]
    else:
        clean = synth_set(args.image_count, args.image_size, args.image_size, bands, seed=4242)
    spec = NoiseSpec(sigma=tuple(args.sigma))
    return clean, [add_noise(x, spec.replace(seed=i)) for i, x in enumerate(clean)]


def cmd_fault_study(args):
    mixture = load_mixture(_read(args.ckpt))
    _, noisy = _study_images(args, mixture.aggregator.bands)
    scale = None if args.scale_to == 0 else args.scale_to
    studies, rows = ex.fault_study(mixture, noisy, args.probs, trials=args.trials, taus=args.taus,
                                   model=args.fault_model, seed=args.seed, scale_to=scale)
    print("probability,faulty_n,nominal_n,faulty_median,nominal_median,auc")
    for st in studies:
        fmed = float(np.median(st.faulty)) if st.faulty.size else math.nan
        nmed = float(np.median(st.nominal)) if st.nominal.size else math.nan
        print(f"{st.probability:g},{st.faulty.size},{st.nominal.size},{fmed:.6g},{nmed:.6g},{st.auc:.4f}")
    print("probability,tau,tpr,fpr")
    for r in rows:
        print(f"{r.probability:g},{r.tau:g},{r.tpr:.4f},{r.fpr:.4f}")


def cmd_power_study(args):
    print("lambda,active,psnr_mean,psnr_std,subsets")
    for path in args.ckpt_list:
        blob = _read(path)
        mixture = load_mixture(blob)
        lam = Trainer.from_checkpoint(blob, []).config.lam
        clean, noisy = _study_images(args, mixture.aggregator.bands)
        for r in ex.power_curve(mixture, clean, noisy, lam):
            print(f"{r.lam:g},{r.active},{r.psnr_mean:.4f},{r.psnr_std:.4f},{r.subsets}")


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="pushbroom", description="Line-by-line hyperspectral denoising mixture.")
    p.add_argument("--threads", type=int, default=1, help="parallel denoiser streams (denoise/bench)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="write a procedural test cube")
    s.add_argument("--lines", type=int, required=True)
    s.add_argument("--cols", type=int, required=True)
    s.add_argument("--bands", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("noise", help="apply the synthetic noise pipeline")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--spec", help="config file with a [noise] section (default: no noise)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_noise)

    def data_args(s):
        s.add_argument("--config", required=True)
        s.add_argument("--data", help="directory of training cubes (default: procedural cubes)")
        s.add_argument("--synth-count", type=int, default=8)
        s.add_argument("--synth-size", type=int, default=64)
        s.add_argument("--synth-seed", type=int, default=1)
        s.add_argument("--out", required=True)

    s = sub.add_parser("pretrain", help="pretrain one mixture member")
    data_args(s)
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="pretrain members and train the mixture")
    data_args(s)
    s.add_argument("--pretrained", nargs="+", help="member checkpoints from 'pretrain'")
    s.add_argument("--resume", help="continue from a joint-phase checkpoint")
    s.add_argument("--metrics", help="CSV file for periodic evaluation records")
    s.add_argument("--eval-every", type=int, default=1, help="epochs between evaluations")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("denoise", help="stream a cube through a trained mixture")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--active", type=int, help="run the first N members")
    g.add_argument("--budget", help="schedule file of 'first-last level' records")
    s.add_argument("--budget-map", help="level=count pairs, e.g. low=1,high=3")
    s.add_argument("--fault-prob", type=float, default=0.0)
    s.add_argument("--fault-seed", type=int, default=0)
    s.add_argument("--fault-model", choices=MODELS, default="bitflip-msb")
    s.add_argument("--fault-manifest", help="write per-member manifests to PATH.<member>")
    s.add_argument("--fault-log", help="write fault records here")
    s.add_argument("--tau", type=float)
    s.add_argument("--window", type=int, default=1, help="lines pooled for the variance test")
    s.add_argument("--no-filter", action="store_true", help="disable fault filtering")
    s.add_argument("--precision", choices=("float32", "float64"), default="float32")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("eval", help="PSNR / SSIM / SAM of a test cube")
    s.add_argument("--clean", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--peak", type=float, default=1.0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="per-line latency and state size")
    s.add_argument("--ckpt", help="trained mixture (default: untrained members of --features)")
    s.add_argument("--cols", type=int, default=1000)
    s.add_argument("--bands", type=int, default=66)
    s.add_argument("--lines", type=int, default=512)
    s.add_argument("--members", type=int, default=5)
    s.add_argument("--features", type=int, default=96)
    s.add_argument("--precision", choices=("float32", "float64"), default="float32")
    s.set_defaults(func=cmd_bench)

    def study_args(s):
        s.add_argument("--images", nargs="+", help="clean cubes (default: procedural)")
        s.add_argument("--image-count", type=int, default=2)
        s.add_argument("--image-size", type=int, default=32)
        s.add_argument("--sigma", type=_floats, default=[0.0, 25.0], help="noise sigma range lo,hi")

    s = sub.add_parser("fault-study", help="attention-variance distributions and TPR/FPR")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--probs", type=_floats, default=[1e-7, 5e-7, 1e-6])
    s.add_argument("--trials", type=int, default=30)
    s.add_argument("--taus", type=_floats, default=[0.001, 0.005, 0.01, 0.02, 0.05])
    s.add_argument("--fault-model", choices=MODELS, default="bitflip-msb")
    s.add_argument("--scale-to", type=int, default=817_920,
                   help="rescale probabilities to this weight count (0 disables)")
    s.add_argument("--seed", type=int, default=0)
    study_args(s)
    s.set_defaults(func=cmd_fault_study)

    s = sub.add_parser("power-study", help="PSNR against active member count")
    s.add_argument("--ckpt-list", type=lambda t: [x for x in t.split(",") if x], required=True)
    study_args(s)
    s.set_defaults(func=cmd_power_study)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"pushbroom: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, HeaderError, FormatError, FileNotFoundError, ValueError, OSError,
            RuntimeError) as exc:
        print(f"pushbroom: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
