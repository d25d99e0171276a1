"""Flip the top exponent bit of one weight in one member and watch the
detector single it out. At 32-bit the corrupted member's features blow up,
which is what the detector keys on; at 64-bit they can stay finite and
disturb the attention of every member alike.

    python demos/fault_filter.py
"""
import numpy as np

from pushbroom.data import synth_set
from pushbroom.denoiser import DenoiserConfig
from pushbroom.faults import FaultSpec, inject
from pushbroom.metrics import psnr
from pushbroom.mixture import Mixture
from pushbroom.noise import NoiseSpec, add_noise
from pushbroom.train import TrainConfig, pretrain_denoiser, train_mixture

cubes = synth_set(4, 32, 32, 6, seed=1)
cfg = DenoiserConfig(bands=6, features=8, blocks=(1, 1, 1), state_size=4)
train = TrainConfig(patch=(16, 16), batch=2, lr=2e-3, steps=150)
mix, _ = train_mixture([pretrain_denoiser(s, cfg, train, cubes) for s in (1, 2, 3)],
                       train.replace(steps=150, seed=4), cubes)

clean = synth_set(1, 12, 32, 6, seed=60)[0]
noisy = add_noise(clean, NoiseSpec(sigma=(10, 10), seed=1)).astype(np.float32)
mix.astype(np.float32)

# hit the last weight of member 1 (uniform 0 < p always fires). A flip in
# the input projection would mostly be absorbed by the layer norm after it.
bad, manifest = inject(mix.denoisers[1], FaultSpec(1e-12, "bitflip-msb"),
                       uniforms=np.r_[np.ones(mix.denoisers[1].num_weights() - 1), 0.0])
_, old, new = manifest.records[0]
bad.astype(np.float32)
print(f"weight {old:.4g} -> {new:.4g}")

faulty = Mixture([mix.denoisers[0], bad, mix.denoisers[2]], mix.aggregator)
filtered, reports = faulty.denoise_image(noisy, filter_faults=True)
raw, _ = faulty.denoise_image(noisy, filter_faults=False)
for r in reports[:3]:
    print(" ".join(f"d{i}:{v:.2e}/{r.verdicts[i]}" for i, v in sorted(r.variances.items())))
print(f"psnr clean mixture {psnr(clean, mix.denoise_image(noisy)[0]):.2f} dB, "
      f"unfiltered {psnr(clean, raw) if np.isfinite(raw).all() else float('-inf'):.2f} dB, "
      f"filtered {psnr(clean, filtered):.2f} dB")
