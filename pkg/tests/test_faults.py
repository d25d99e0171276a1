import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushbroom.denoiser import Denoiser, DenoiserConfig
from pushbroom.faults import (F32_MAX, FaultSpec, StaleManifestError, flip_msb32, inject,
                              read_manifest, revert, write_manifest)

SMALL = DenoiserConfig(bands=4, features=4, blocks=(1, 1, 1), state_size=4)


def params(den):
    return {n: p.data.copy() for n, p in den.named_parameters()}


def assert_same(a, b):
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k], err_msg=k)


def flat_weights(den):
    return np.concatenate([t.data.ravel() for _, t, _ in den.weight_table()])


def test_zero_probability_changes_nothing():
    den = Denoiser(SMALL)
    bad, manifest = inject(den, FaultSpec(0.0, seed=3))
    assert len(manifest) == 0
    assert_same(params(den), params(bad))


def test_full_probability_with_zero_delta_lists_every_weight_unchanged():
    den = Denoiser(SMALL)
    bad, manifest = inject(den, FaultSpec(1.0, model="additive-deviation", delta=0.0))
    assert manifest.ids().tolist() == list(range(den.num_weights()))
    assert_same(params(den), params(bad))


def test_exactly_the_manifested_weights_differ():
    den = Denoiser(SMALL)
    bad, manifest = inject(den, FaultSpec(0.05, seed=4))
    before, after = flat_weights(den), flat_weights(bad)
    changed = np.flatnonzero(before != after)
    np.testing.assert_array_equal(changed, manifest.ids())
    for wid, old, new in manifest.records:
        assert before[wid] == old and after[wid] == new
    assert np.isfinite(after).all() and np.abs(after).max() <= F32_MAX
    # non-weight parameters are untouched
    names = {n for n, _, _ in den.weight_table()}
    p0, p1 = params(den), params(bad)
    for n in p0:
        if n not in names:
            np.testing.assert_array_equal(p0[n], p1[n])


def test_original_is_not_modified():
    den = Denoiser(SMALL)
    snap = params(den)
    inject(den, FaultSpec(0.5, seed=5))
    assert_same(snap, params(den))


def test_fault_count_is_binomial():
    den = Denoiser(DenoiserConfig(features=16))
    n = den.num_weights()
    p = 1e-3
    sizes = np.array([len(inject(den, FaultSpec(p, seed=s))[1]) for s in range(1000)])
    sigma = np.sqrt(n * p * (1 - p) / sizes.size)
    assert abs(sizes.mean() - n * p) < 3 * sigma


def test_same_seed_same_manifest():
    den = Denoiser(SMALL)
    a = inject(den, FaultSpec(0.02, seed=9))[1]
    b = inject(den, FaultSpec(0.02, seed=9))[1]
    assert a.records == b.records
    assert a.records != inject(den, FaultSpec(0.02, seed=10))[1].records


def test_revert_restores_bitwise_and_is_single_use():
    den = Denoiser(SMALL)
    bad, manifest = inject(den, FaultSpec(0.1, seed=11))
    # unrelated reads in between must not matter
    _ = flat_weights(bad), bad.num_weights(), bad.state_dict()
    back = revert(bad, manifest)
    assert_same(params(den), params(back))
    with pytest.raises(StaleManifestError):
        revert(bad, manifest)


def test_revert_rejects_a_foreign_weight_space():
    den = Denoiser(SMALL)
    _, manifest = inject(den, FaultSpec(0.1, seed=12))
    with pytest.raises(StaleManifestError):
        revert(Denoiser(SMALL.replace(features=6)), manifest)


def test_coupled_uniforms_nest_the_fault_sets():
    den = Denoiser(SMALL)
    u = np.random.default_rng(13).random(den.num_weights())
    small = set(inject(den, FaultSpec(0.01), uniforms=u)[1].ids().tolist())
    large = set(inject(den, FaultSpec(0.1), uniforms=u)[1].ids().tolist())
    assert small <= large and len(large) > len(small)
    with pytest.raises(ValueError):
        inject(den, FaultSpec(0.1), uniforms=u[:-1])


def test_additive_deviation_uses_the_layer_std():
    den = Denoiser(SMALL)
    table = den.weight_table()
    _, manifest = inject(den, FaultSpec(0.2, model="additive-deviation", delta=10.0, seed=14))
    offsets = [off for _, _, off in table]
    for wid, old, new in manifest.records:
        slot = int(np.searchsorted(offsets, wid, side="right")) - 1
        assert new - old == pytest.approx(10.0 * table[slot][1].data.std(), rel=1e-12)


def test_spec_validation():
    with pytest.raises(ValueError):
        FaultSpec(1.5)
    with pytest.raises(ValueError):
        FaultSpec(0.1, model="stuck-at")


def test_manifest_file_roundtrip(tmp_path):
    den = Denoiser(SMALL)
    bad, manifest = inject(den, FaultSpec(0.05, seed=15))
    path = tmp_path / "faults.txt"
    write_manifest(path, manifest)
    first = path.read_text().splitlines()[0]
    assert first == f"# weights={den.num_weights()} faults={len(manifest)}"
    back = read_manifest(path)
    assert back.records == manifest.records and back.n_weights == manifest.n_weights
    assert_same(params(den), params(revert(bad, back)))


def test_flip_msb_examples():
    np.testing.assert_array_equal(flip_msb32([0.5]), [2.0 ** 127])
    np.testing.assert_array_equal(flip_msb32([2.0]), [0.0])
    np.testing.assert_array_equal(flip_msb32([-3.0]), [-(2.0 ** -127)])
    # an all-ones exponent would be Inf: clamp, keep the sign
    np.testing.assert_array_equal(flip_msb32([1.0, -1.5]), [F32_MAX, -F32_MAX])
    np.testing.assert_array_equal(flip_msb32(flip_msb32([0.25])), [0.25])


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=float(np.finfo(np.float32).tiny), max_value=float(F32_MAX),
                 allow_nan=False, allow_infinity=False, width=32))
def test_flip_msb_changes_magnitude_at_least_twofold(x):
    y = float(flip_msb32([x])[0])
    assert y < 0 or y >= 2 * x or y <= x / 2
