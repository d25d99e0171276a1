"""Power scalability: train the same members under two cardinality
preferences and compare quality as fewer members are switched on.

    python demos/power_levels.py
"""
from pushbroom.data import synth_set
from pushbroom.denoiser import DenoiserConfig
from pushbroom.experiments import power_curve
from pushbroom.noise import NoiseSpec, add_noise
from pushbroom.power import cardinality_pmf
from pushbroom.train import TrainConfig, pretrain_denoiser, train_mixture

cubes = synth_set(4, 32, 32, 6, seed=1)
cfg = DenoiserConfig(bands=6, features=8, blocks=(1, 1, 1), state_size=4)
train = TrainConfig(patch=(16, 16), batch=2, lr=2e-3, steps=150)
members = [pretrain_denoiser(s, cfg, train, cubes) for s in (1, 2, 3)]

held = synth_set(1, 32, 32, 6, seed=70)
noisy = [add_noise(held[0], NoiseSpec(sigma=(15, 15), seed=2))]
for lam in (-1.0, 1.0):
    print(f"lambda={lam:+g} P(N)={cardinality_pmf(lam, 3).round(3)}")
    mix, _ = train_mixture([m.copy() for m in members], train.replace(steps=200, lam=lam), cubes)
    for row in power_curve(mix, held, noisy, lam):
        print(f"  {row.active} active: {row.psnr_mean:.2f} dB over {row.subsets} subsets")
