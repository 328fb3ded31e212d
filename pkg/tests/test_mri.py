import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cstn import fft
from cstn.mri import (PI32, ComplexImage, KSpace, MultiEchoVolume, from_kspace, generate_phantom, load_volume,
                      save_volume, signal_model, simulate_lowres, to_kspace, truncate_kspace, wrap_phase)
from oracles import naive_dft2_centered


def rand_image(rng, h, w):
    return ComplexImage.from_complex(rng.uniform(0.1, 1, (h, w)) * np.exp(1j * rng.uniform(-3, 3, (h, w))))


# ---------------------------------------------------------------- FFT

@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 12, 31, 37, 64, 97, 384])
def test_fft_matches_numpy_1d(n):
    x = np.random.default_rng(n).standard_normal(n) + 1j * np.random.default_rng(n + 1).standard_normal(n)
    np.testing.assert_allclose(fft.fft(x), np.fft.fft(x), atol=1e-9 * max(n, 1))
    np.testing.assert_allclose(fft.fft(x, inverse=True), np.fft.ifft(x) * n, atol=1e-9 * max(n, 1))


def test_fftshift_puts_dc_at_half():
    k = fft.fft2c(np.ones((6, 5)))
    assert np.argmax(np.abs(k)) == np.ravel_multi_index((3, 2), (6, 5))


def test_constant_image_all_energy_at_dc():
    h, w, c = 8, 6, 0.7
    k = to_kspace(ComplexImage(np.full((h, w), c), np.zeros((h, w))))
    assert k.data[h // 2, w // 2] == pytest.approx(c * np.sqrt(h * w), abs=1e-5)
    rest = k.data.copy()
    rest[h // 2, w // 2] = 0
    assert np.abs(rest).max() < 1e-5


@pytest.mark.parametrize("h", [4, 6, 8, 12])
@pytest.mark.parametrize("w", [4, 6, 8, 12])
def test_kspace_matches_naive_dft(h, w):
    img = rand_image(np.random.default_rng(h * 13 + w), h, w)
    k = to_kspace(img)
    ref = naive_dft2_centered(img.to_complex())
    assert np.abs(k.data - ref).max() < 1e-4


def test_delta_at_dc_gives_constant_image():
    k = np.zeros((6, 8), complex)
    k[3, 4] = np.sqrt(48)
    img = from_kspace(KSpace(k))
    np.testing.assert_allclose(img.magnitude, 1.0, atol=1e-6)
    np.testing.assert_allclose(img.phase, 0.0, atol=1e-6)


def test_conjugate_symmetric_kspace_gives_real_image():
    real = np.random.default_rng(3).uniform(0.2, 1.0, (8, 8))
    img = from_kspace(KSpace(fft.fft2c(real)))
    np.testing.assert_allclose(img.phase, 0.0, atol=1e-5)


@pytest.mark.parametrize("n", [12, 16])
def test_round_trip_small(n):
    img = rand_image(np.random.default_rng(n), n, n)
    back = from_kspace(to_kspace(img))
    assert np.abs(back.to_complex() - img.to_complex()).max() < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 2 ** 31 - 1))
def test_parseval(h, w, seed):
    img = rand_image(np.random.default_rng(seed), h, w)
    k = to_kspace(img)
    e_img = np.sum(np.abs(img.to_complex()) ** 2)
    e_k = np.sum(np.abs(k.data) ** 2)
    assert abs(e_img - e_k) <= 1e-5 * max(e_img, 1)


# ---------------------------------------------------------------- truncation

def test_truncate_to_same_size_is_identity():
    k = to_kspace(rand_image(np.random.default_rng(0), 10, 12))
    np.testing.assert_array_equal(truncate_kspace(k, 10, 12).data, k.data)


def test_truncate_too_large_rejected():
    k = to_kspace(rand_image(np.random.default_rng(0), 8, 8))
    with pytest.raises(ValueError):
        truncate_kspace(k, 9, 8)


@pytest.mark.parametrize("size,target", [(12, 8), (12, 6), (16, 12), (15, 9)])
def test_truncation_preserves_constant_value(size, target):
    img = ComplexImage(np.full((size, size), 0.8), np.zeros((size, size)))
    k = KSpace(naive_dft2_centered(img.to_complex()))
    low = from_kspace(truncate_kspace(k, target, target))
    np.testing.assert_allclose(low.magnitude, 0.8, atol=1e-4)


def test_truncation_keeps_dc_centered():
    k = KSpace(np.arange(36, dtype=complex).reshape(6, 6))
    t = truncate_kspace(k, 4, 4)
    assert t.data[2, 2] / np.sqrt(16 / 36) == k.data[3, 3]


def test_simulate_lowres_protocol_points():
    vol, _ = generate_phantom(1, 384, 384)
    for n in (256, 192):
        low = simulate_lowres(vol, n, n)
        assert low.shape == (n, n)
        assert low.num_echoes == 3
        assert low.echo_times_ms == vol.echo_times_ms


def test_simulate_lowres_full_size_is_identity():
    vol, _ = generate_phantom(2, 48, 40)
    same = simulate_lowres(vol, 48, 40)
    for a, b in zip(vol.echoes, same.echoes):
        assert np.abs(a.to_complex() - b.to_complex()).max() < 1e-5


def test_truncation_produces_gibbs_ringing():
    # a sharp-edged disc: the truncated profile overshoots the plateau
    yy, xx = np.mgrid[:64, :64]
    disc = ((yy - 32) ** 2 + (xx - 32) ** 2 < 15 ** 2).astype(float)
    vol = MultiEchoVolume([ComplexImage(disc, np.zeros_like(disc))], (10.0,))
    low = simulate_lowres(vol, 32, 32).echoes[0].magnitude
    assert low.max() > 1.0 + 1e-3


# ---------------------------------------------------------------- phase / types

def test_wrap_phase_range():
    p = wrap_phase(np.linspace(-20, 20, 2001))
    assert p.dtype == np.float32
    assert p.min() > -np.pi and p.max() <= np.pi
    assert wrap_phase([-np.pi])[0] == PI32
    assert wrap_phase([np.pi])[0] == PI32


def test_complex_image_validation():
    with pytest.raises(ValueError):
        ComplexImage(-np.ones((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        ComplexImage(np.ones((2, 2)), np.zeros((2, 3)))


def test_volume_validation():
    e = ComplexImage(np.ones((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValueError):
        MultiEchoVolume([e, e], (10.0, 10.0))
    with pytest.raises(ValueError):
        MultiEchoVolume([e], (0.0,))
    with pytest.raises(ValueError):
        MultiEchoVolume([e, ComplexImage(np.ones((3, 4)), np.zeros((3, 4)))], (1.0, 2.0))


# ---------------------------------------------------------------- phantom

def test_phantom_deterministic():
    a, ma = generate_phantom(7, 64, 64)
    b, mb = generate_phantom(7, 64, 64)
    np.testing.assert_array_equal(a.magnitude_stack(), b.magnitude_stack())
    np.testing.assert_array_equal(a.phase_stack(), b.phase_stack())
    c, _ = generate_phantom(8, 64, 64)
    assert not np.array_equal(a.magnitude_stack(), c.magnitude_stack())


def test_phantom_shapes_and_range():
    vol, maps = generate_phantom(0, 96, 80)
    assert vol.shape == (96, 80) and vol.num_echoes == 3
    assert vol.echo_times_ms == (14.0, 27.0, 40.0)
    assert maps["m0"].max() == pytest.approx(1.0)
    assert vol.magnitude_stack().max() <= 1.0
    assert maps["inclusions"].any()


def test_phantom_minimum_size():
    with pytest.raises(ValueError):
        generate_phantom(0, 31, 64)


def test_decay_formula_ratios():
    tes = (14.0, 27.0, 40.0)
    ratios = [abs(signal_model(1.0, 0.05, 0.0, 0.0, te)) for te in tes]
    np.testing.assert_allclose(ratios, [0.4966, 0.2592, 0.1353], atol=1e-4)


def test_zero_offresonance_shares_phase():
    vol, maps = generate_phantom(3, 64, 64, df_scale=0.0)
    ph = vol.phase_stack()
    np.testing.assert_array_equal(ph[0], ph[1])
    np.testing.assert_array_equal(ph[1], ph[2])
    inside = maps["m0"] > 0
    np.testing.assert_allclose(ph[0][inside], wrap_phase(maps["phi0"])[inside], atol=1e-5)


def test_single_echo_phantom():
    vol, _ = generate_phantom(0, 32, 32, (10.0,))
    assert vol.num_echoes == 1


def test_volume_file_round_trip(tmp_path):
    vol, _ = generate_phantom(4, 40, 36)
    save_volume(tmp_path / "v", vol)
    back = load_volume(tmp_path / "v")
    np.testing.assert_array_equal(back.magnitude_stack(), vol.magnitude_stack())
    np.testing.assert_array_equal(back.phase_stack(), vol.phase_stack())
    assert back.echo_times_ms == vol.echo_times_ms
