import numpy as np
import pytest

from pushbroom import autodiff as ad
from pushbroom.autodiff import ShapeError, Tensor
from pushbroom.container import FormatError
from pushbroom.denoiser import (ConfigError, Denoiser, DenoiserConfig, DenoiserStream,
                                FaultSuspected, count_flops_per_pixel, denoiser_step, deserialize,
                                forward_image, serialize)
from pushbroom.gradcheck import gradcheck

SMALL = DenoiserConfig(bands=4, features=4, blocks=(1, 1, 1), state_size=4)


def enliven(den, seed=0, scale=0.3):
    """Random values for the zero-initialised parameters (biases, residual scales)."""
    rng = np.random.default_rng(seed)
    for _, p in den.named_parameters():
        if not p.data.any():
            p.data = scale * rng.standard_normal(p.shape)
    return den


def stream_all(den, cube):
    st = DenoiserStream(den, cube.shape[1])
    return np.concatenate([denoiser_step(st, cube[l:l + 1]) for l in range(cube.shape[0])])


@pytest.mark.parametrize("backend", ["mamba", "lstm", "causal_conv"])
def test_streaming_equals_batch(backend):
    den = enliven(Denoiser(DenoiserConfig(backend=backend)))
    cube = np.random.default_rng(1).uniform(0, 1, (16, 16, 8))
    np.testing.assert_allclose(stream_all(den, cube), forward_image(den, cube), rtol=0, atol=1e-10)


def test_odd_width_is_reflect_padded_and_cropped():
    den = enliven(Denoiser(SMALL))
    cube = np.random.default_rng(2).uniform(0, 1, (5, 7, 4))
    out = forward_image(den, cube)
    assert out.shape == (5, 7, 4)
    np.testing.assert_allclose(stream_all(den, cube), out, atol=1e-10)
    with pytest.raises(ConfigError):
        Denoiser(SMALL.replace(pad_policy="error"))(Tensor(cube))


def test_causality_of_whole_denoiser():
    den = enliven(Denoiser(SMALL))
    cube = np.random.default_rng(3).uniform(0, 1, (9, 8, 4))
    full = forward_image(den, cube)
    for p in range(1, 9):
        np.testing.assert_array_equal(forward_image(den, cube[:p]), full[:p])


def test_zero_input_gives_zero_features():
    den = Denoiser(DenoiserConfig())
    assert not forward_image(den, np.zeros((3, 8, 8))).any()


def test_seeds_give_different_members():
    cube = np.random.default_rng(4).uniform(0, 1, (4, 8, 8))
    a = forward_image(Denoiser(DenoiserConfig(seed=1)), cube)
    b = forward_image(Denoiser(DenoiserConfig(seed=2)), cube)
    assert np.abs(a - b).max() > 0


def test_exactly_two_stream_states():
    den = Denoiser(DenoiserConfig())
    st = DenoiserStream(den, 8)
    assert len(st.states) == 2


def test_weight_table_is_a_bijection_over_conv_and_linear_weights():
    den = Denoiser(DenoiserConfig())
    table = den.weight_table()
    expected = 0
    for name, t, off in table:
        assert off == expected
        expected += t.size
        assert name.endswith("weight") and "norm" not in name
    assert expected == den.num_weights()
    names = {n for n, _, _ in table}
    for name, p in den.named_parameters():
        if name not in names:
            assert name.endswith(("bias", "beta", "gamma", "a_log", "d_skip")) or ".norm" in name \
                or name.startswith("norm")


def _enumerate_flops(c: DenoiserConfig) -> float:
    """Independent per-layer count, written from the layer list."""
    F, B, S, K, E = c.features, c.bands, c.state_size, c.kernel, c.expand
    conv = lambda cin, cout, k: 2 * cin * cout * k  # noqa: E731

    def dasc(w):
        return conv(w, 2 * w, 1) + 2 * 2 * w * 3 + conv(w, w, 1) + conv(w, 2 * w, 1) + conv(w, w, 1)

    inner = F * E
    mamba = (conv(F, 2 * inner, 1) + 2 * inner * K + conv(inner, inner, 1) + 2 * conv(inner, S, 1)
             + conv(inner, F, 1) + 6 * inner * S)
    total = conv(B, F, c.proj_kernel) + 2 * mamba
    for i in range(c.levels - 1):
        w = F * 2 ** i
        total += 2 * c.blocks[i] * dasc(w) / 2 ** i
        total += conv(2 * w, w, 2) / 2 / 2 ** i  # transpose conv: one tap per output position
        total += conv(w, 2 * w, 3) / 2 ** (i + 1)
    w = F * 2 ** (c.levels - 1)
    total += c.blocks[-1] * dasc(w) / 2 ** (c.levels - 1)
    return total


def test_flops_match_independent_enumeration():
    for cfg in (DenoiserConfig(), SMALL, DenoiserConfig(features=24, expand=2)):
        assert count_flops_per_pixel(Denoiser(cfg)) == _enumerate_flops(cfg)


def test_flops_grow_quadratically_with_width():
    a = count_flops_per_pixel(Denoiser(DenoiserConfig(features=32)))
    b = count_flops_per_pixel(Denoiser(DenoiserConfig(features=64)))
    assert 3.5 < b / a < 4.0


def test_serialize_roundtrip_and_errors():
    den = enliven(Denoiser(SMALL))
    blob = serialize(den)
    back = deserialize(blob)
    for (n1, p1), (n2, p2) in zip(den.named_parameters(), back.named_parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(p1.data, p2.data)
    cube = np.random.default_rng(5).uniform(0, 1, (3, 8, 4))
    np.testing.assert_array_equal(stream_all(den, cube), stream_all(back, cube))
    with pytest.raises(FormatError):
        deserialize(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        deserialize(blob[:-3])
    bumped = blob[:4] + (2).to_bytes(2, "little") + blob[6:]
    with pytest.raises(FormatError, match="version"):
        deserialize(bumped)


def test_stream_snapshot_restore_continues_identically():
    den = enliven(Denoiser(SMALL))
    cube = np.random.default_rng(6).uniform(0, 1, (6, 8, 4))
    ref = stream_all(den, cube)
    st = DenoiserStream(den, 8)
    for l in range(3):
        denoiser_step(st, cube[l:l + 1])
    snap = st.snapshot()
    st2 = DenoiserStream(den, 8)
    st2.restore(snap)
    rest = np.concatenate([denoiser_step(st2, cube[l:l + 1]) for l in range(3, 6)])
    np.testing.assert_array_equal(rest, ref[3:])


def test_denoiser_step_rejects_bad_lines_and_flags_overflow():
    den = Denoiser(SMALL)
    st = DenoiserStream(den, 8)
    with pytest.raises(ShapeError):
        denoiser_step(st, np.zeros((2, 8, 4)))
    den.proj.weight.data[:] = 1e308
    with pytest.raises(FaultSuspected):
        denoiser_step(st, np.ones((1, 8, 4)))
    assert st.line_index == 0


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(backend="gru")
    with pytest.raises(ConfigError):
        DenoiserConfig(levels=3, blocks=(1, 1))
    with pytest.raises(ConfigError):
        DenoiserConfig.from_dict({"bands": 4, "colour": "red"})
    assert DenoiserConfig.full_size().features == 96


def test_end_to_end_gradient_8x8x4():
    den = enliven(Denoiser(SMALL), scale=0.2)
    x = Tensor(np.random.default_rng(7).uniform(0, 1, (8, 8, 4)), requires_grad=True)
    assert gradcheck(lambda: den(x), [x] + den.parameters(), h=1e-6) < 1e-3


def test_memory_blocks_see_previous_lines():
    den = enliven(Denoiser(SMALL))
    cube = np.random.default_rng(8).uniform(0, 1, (4, 8, 4))
    changed = cube.copy()
    changed[0] += 0.5
    a, b = forward_image(den, cube), forward_image(den, changed)
    assert np.abs(a[3] - b[3]).max() > 0


def test_no_graph_recorded_in_streaming():
    den = Denoiser(SMALL)
    st = DenoiserStream(den, 8)
    with ad.no_grad():
        pass
    out = denoiser_step(st, np.ones((1, 8, 4)))
    assert isinstance(out, np.ndarray)
