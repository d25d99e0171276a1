import numpy as np
import pytest

from pushbroom import autodiff as ad
from pushbroom.autodiff import Tensor
from pushbroom.data import sample_patches, synth_cube, synth_set
from pushbroom.denoiser import Denoiser, DenoiserConfig
from pushbroom.mixture import Aggregator, Mixture, MixtureStream
from pushbroom.noise import NoiseSpec, add_noise
from pushbroom.power import sample_subset
from pushbroom.train import (METRICS_HEADER, Adam, DivergenceError, TrainConfig,
                             Trainer, _loss, evaluate, load_mixture, load_pretrained, lr_at,
                             metrics_record, pretrain_denoiser, save_mixture, train_mixture)

TINY = DenoiserConfig(bands=4, features=4, blocks=(1, 1, 1), state_size=4)
FAST = TrainConfig(patch=(8, 8), batch=2, steps=20, steps_per_epoch=10, lr=2e-3,
                   noise=NoiseSpec(sigma=(10, 25)))


@pytest.fixture(scope="module")
def cubes():
    return synth_set(3, 16, 16, 4, seed=1)


def test_learning_rate_schedule():
    assert lr_at(0) == 5e-4
    assert lr_at(29) == 5e-4
    assert lr_at(30) == 2.5e-4
    assert lr_at(129) == 2.5e-4
    assert lr_at(130) == 1.25e-4
    assert lr_at(230) == 6.25e-5
    lrs = [lr_at(e) for e in range(500)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    cfg = TrainConfig(steps_per_epoch=10)
    assert cfg.lr_for_step(299) == 5e-4 and cfg.lr_for_step(300) == 2.5e-4


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(loss="huber")
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    cfg = FAST.replace(lam=-1.0, loss="l1")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_synthetic_cubes_and_patches():
    c = synth_cube(12, 10, 5, seed=3)
    assert c.shape == (12, 10, 5) and c.min() >= 0.05 - 1e-12 and c.max() <= 0.95 + 1e-12
    np.testing.assert_array_equal(c, synth_cube(12, 10, 5, seed=3))
    p = sample_patches([c], np.random.default_rng(0), 3, 4, 6)
    assert p.shape == (3, 4, 6, 5)
    with pytest.raises(ValueError):
        sample_patches([c], np.random.default_rng(0), 1, 20, 4)


def test_adam_matches_hand_update():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    adam = Adam()
    g = np.array([0.5, -0.25])
    adam.step([("p", p)], {p.id: g}, 0.1)
    # first step: mhat = g, vhat = g^2, update = lr * sign(g) (up to eps)
    np.testing.assert_allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)
    adam.step([("p", p)], {p.id: g}, 0.1)
    assert adam.t["p"] == 2


def test_l1_loss():
    pred = Tensor(np.array([1.0, -1.0, 3.0]))
    assert float(_loss(pred, np.zeros(3), "l1").data) == pytest.approx(5 / 3)
    assert float(_loss(pred, np.zeros(3), "mse").data) == pytest.approx(11 / 3)


def test_pretraining_halves_the_loss(cubes):
    den = Denoiser(TINY.replace(seed=3))
    cfg = FAST.replace(steps=200, patch=(16, 16), batch=2, lr=3e-3, steps_per_epoch=1000, seed=3)
    trainer = Trainer(cfg, cubes, [den], phase="pretrain")
    losses = trainer.run()
    assert np.mean(losses[-20:]) <= 0.5 * losses[0]


def test_seeds_give_different_pretrained_members(cubes):
    a = pretrain_denoiser(1, TINY, FAST, cubes)
    b = pretrain_denoiser(2, TINY, FAST, cubes)
    diff = max(np.abs(pa.data - pb.data).max()
               for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()))
    assert diff > 0


def test_small_step_decreases_fixed_batch_loss(cubes):
    den = Denoiser(TINY.replace(seed=4))
    trainer = Trainer(FAST, cubes, [den], phase="pretrain")
    clean, noisy = trainer.next_batch()

    def batch_loss():
        with ad.no_grad():
            return float(_loss(Tensor(noisy) - trainer.head(den(Tensor(noisy))), clean, "mse").data)

    before = batch_loss()
    y = Tensor(noisy)
    loss = _loss(y - trainer.head(den(y)), clean, "mse")
    named = trainer._named(["d0", "head"])
    grads = ad.backward(loss, [p for _, p in named])
    trainer.adam.step(named, grads, 1e-6)
    assert batch_loss() < before


def test_non_sampled_members_are_untouched(cubes):
    dens = [Denoiser(TINY.replace(seed=s)) for s in (5, 6, 7)]
    trainer = Trainer(FAST.replace(lam=-50.0), cubes, dens, phase="joint")
    for _ in range(5):
        snap = [{n: p.data.copy() for n, p in d.named_parameters()} for d in dens]
        state = trainer.rng.bit_generator.state
        trainer.next_batch()
        active = sample_subset(trainer.policy, trainer.rng)
        trainer.rng.bit_generator.state = state
        trainer.step()
        assert len(active) == 1
        for i, d in enumerate(dens):
            changed = any((p.data != snap[i][n]).any() for n, p in d.named_parameters())
            assert changed == (i in active)


def test_checkpoint_resume_is_bitwise(cubes):
    cfg = FAST.replace(steps=12, seed=9)
    dens = [Denoiser(TINY.replace(seed=s)) for s in (1, 2)]
    straight = Trainer(cfg, cubes, dens, phase="joint")
    full = straight.run()

    dens2 = [Denoiser(TINY.replace(seed=s)) for s in (1, 2)]
    first = Trainer(cfg, cubes, dens2, phase="joint")
    part = first.run(5)
    resumed = Trainer.from_checkpoint(first.checkpoint(), cubes)
    rest = resumed.run()
    assert part + rest == full
    assert resumed.history == full
    for a, b in zip(straight.mixture.denoisers, resumed.mixture.denoisers):
        for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data)


def test_pretrain_checkpoint_and_mixture_blobs(cubes):
    trainer = Trainer(FAST.replace(steps=3), cubes, [Denoiser(TINY)], phase="pretrain")
    trainer.run()
    blob = trainer.checkpoint()
    den = load_pretrained(blob)
    np.testing.assert_array_equal(den.proj.weight.data, trainer.denoisers[0].proj.weight.data)
    with pytest.raises(ValueError):
        load_mixture(blob)
    mix = Mixture([Denoiser(TINY.replace(seed=s)) for s in (1, 2)], Aggregator(4, 4, seed=3))
    back = load_mixture(save_mixture(mix))
    np.testing.assert_array_equal(back.aggregator.wk.weight.data, mix.aggregator.wk.weight.data)
    with pytest.raises(ValueError):
        load_pretrained(save_mixture(mix))


def test_divergence_is_reported(cubes):
    den = Denoiser(TINY)
    den.proj.weight.data[:] = 1e308
    trainer = Trainer(FAST, cubes, [den], phase="pretrain")
    with pytest.raises(DivergenceError, match="step 0"):
        trainer.step()


def test_batch_training_forward_equals_streaming_at_32_bit(cubes):
    mix = Mixture([Denoiser(TINY.replace(seed=s)) for s in (1, 2)], Aggregator(4, 4, seed=5))
    mix, _ = train_mixture(mix.denoisers, FAST.replace(steps=10), cubes, mix.aggregator)
    y = add_noise(cubes[0], NoiseSpec(sigma=(20, 20), seed=1)).astype(np.float32)
    with ad.no_grad():
        batch = mix.forward_batch(Tensor(y.astype(np.float64)), (0, 1)).data
    mix.astype(np.float32)
    stream = MixtureStream(mix, y.shape[1], filter_faults=False, dtype=np.float32)
    streamed = np.concatenate([stream.step(y[l:l + 1])[0] for l in range(y.shape[0])])
    assert streamed.dtype == np.float32
    assert np.abs(streamed - batch).max() < 1e-6


def test_joint_training_improves_on_the_pretrained_starting_point(cubes):
    cfg = FAST.replace(patch=(16, 16), steps=150, lr=3e-3, steps_per_epoch=1000)
    dens = [pretrain_denoiser(s, TINY, cfg, cubes) for s in (1, 2)]
    agg = Aggregator(4, 4, seed=11)
    held = synth_set(2, 16, 16, 4, seed=77)
    noisy = [add_noise(x, NoiseSpec(sigma=(10, 25), seed=i)) for i, x in enumerate(held)]
    start = Mixture([d.copy() for d in dens], Aggregator(4, 4, seed=11))
    before = {a: evaluate(start, held, noisy, a)["psnr"] for a in ((0,), (0, 1))}
    mix, _ = train_mixture(dens, cfg.replace(seed=12), cubes, agg)
    after = {a: evaluate(mix, held, noisy, a)["psnr"] for a in ((0,), (0, 1))}
    for a in before:
        assert after[a] > before[a]


def test_metrics_record_format():
    assert METRICS_HEADER == "epoch,active,psnr,ssim,sam"
    rec = metrics_record(3, 2, {"psnr": 30.12346, "ssim": 0.9, "sam": 0.05})
    assert rec == "3,2,30.1235,0.900000,0.050000"
