import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from soilgen.spectra import (
    N_COARSE, N_WL, WAVELENGTHS, CoarseSpectrum, Spectrum, SpectrumError, absorbance_to_reflectance,
    downsample_4nm, read_cache, read_spectra_csv, reflectance_to_absorbance, reshape_to_wavebands,
    savgol_values, trim_to_canonical, upsample_linear, window_samples, write_cache, write_spectra_csv,
)


def partial(lo, hi, fill=0.3):
    row = np.full(N_WL, np.nan)
    row[lo - 400 : hi - 400 + 1] = fill
    return Spectrum.from_array(row)


def test_absorbance_examples():
    assert absorbance_to_reflectance(0.0) == 1.0
    assert absorbance_to_reflectance(1.0) == pytest.approx(0.1, abs=1e-15)
    assert absorbance_to_reflectance(2.0) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(SpectrumError):
        absorbance_to_reflectance(np.inf)
    with pytest.raises(SpectrumError):
        reflectance_to_absorbance(0.0)


def test_absorbance_round_trip():
    r = np.random.default_rng(0).uniform(1e-3, 1.5, 10_000)
    back = absorbance_to_reflectance(reflectance_to_absorbance(r))
    assert np.max(np.abs(back - r)) <= 1e-12


def test_trim_examples():
    s = trim_to_canonical(np.arange(350, 2501), np.linspace(0.1, 0.5, 2151))
    assert s.is_full
    s = trim_to_canonical(np.arange(1100, 2501), np.ones(1401))
    assert s.measured_range == (1100, 2499)
    wl = np.arange(400.0, 2450.5, 0.5)
    s = trim_to_canonical(wl, np.ones(wl.size))
    assert s.measured_range == (400, 2449)
    with pytest.raises(SpectrumError):
        trim_to_canonical(np.arange(410, 440), np.ones(30))


@settings(max_examples=200, deadline=None)
@given(st.floats(300, 2300), st.floats(60, 2500))
def test_trim_rule_divisible_by_50(start, span):
    wl = np.linspace(start, start + span, 257)
    try:
        s = trim_to_canonical(wl, np.full(wl.size, 0.4))
    except SpectrumError:
        return
    lo, hi = s.measured_range
    assert lo % 50 == 0 and (hi + 1) % 50 == 0
    assert lo >= max(start, 400) and hi <= min(start + span, 2499)
    np.testing.assert_array_equal(s.values[s.mask], 0.4)
    assert not s.values[~s.mask].any()


def test_spectrum_invariants():
    with pytest.raises(SpectrumError):
        Spectrum(np.zeros(10), np.ones(10, bool))
    with pytest.raises(SpectrumError):
        Spectrum.from_array(np.full(N_WL, np.nan))
    row = np.full(N_WL, 0.2)
    row[500:600] = np.nan
    with pytest.raises(SpectrumError):
        Spectrum.from_array(row)  # interior gap
    s = Spectrum.full(np.ones(N_WL))
    with pytest.raises(ValueError):
        s.values[0] = 2.0


def test_reshape_round_trip_bit_exact():
    v = np.random.default_rng(1).random(N_WL)
    w = reshape_to_wavebands(Spectrum.full(v))
    assert w.bands.shape == (42, 50) and w.band_mask.all()
    assert np.array_equal(w.flatten(), v)


def test_reshape_partial_bands():
    w = reshape_to_wavebands(partial(1100, 2499))
    assert w.band_mask.sum() == 28
    assert not w.band_mask[:14].any()
    assert not w.bands[:14].any()


def test_downsample_upsample():
    v = 0.1 + 1e-4 * (WAVELENGTHS - 400)
    c = downsample_4nm(Spectrum.full(v))
    assert c.values.shape == (N_COARSE,)
    np.testing.assert_allclose(upsample_linear(c).values, v, atol=1e-13)
    with pytest.raises(SpectrumError):
        downsample_4nm(partial(400, 1099))
    with pytest.raises(SpectrumError):
        CoarseSpectrum(np.zeros(526))


def test_window_samples():
    assert window_samples(100) == 101
    assert window_samples(101) == 101


@pytest.mark.parametrize("degree", [0, 1, 2])
def test_savgol_reproduces_polynomials(degree):
    x = np.linspace(-1.0, 1.0, N_WL)
    coef = np.random.default_rng(degree).normal(size=degree + 1)
    p = np.polyval(coef, x)
    assert np.max(np.abs(savgol_values(p, 100, 2) - p)) <= 1e-9


def test_savgol_mirror_edges_and_errors():
    v = np.random.default_rng(0).random(N_WL)
    out = savgol_values(v, 100, 2, edge="mirror")
    assert out.shape == v.shape
    with pytest.raises(SpectrumError):
        savgol_values(v[:50], 100, 2)
    with pytest.raises(SpectrumError):
        savgol_values(v, 100, 2, edge="wrap")


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    spectra = [Spectrum.full(rng.random(N_WL), "a"), partial(1100, 2499, 0.25)]
    write_spectra_csv(tmp_path / "s.csv", spectra, ["a", "b"])
    back = read_spectra_csv(tmp_path / "s.csv")
    assert [s.meta for s in back] == ["a", "b"]
    assert np.array_equal(back[0].values, spectra[0].values)
    assert np.array_equal(back[1].mask, spectra[1].mask)


def test_csv_absorbance(tmp_path):
    (tmp_path / "a.csv").write_text("wavelength_nm,x\n" + "".join(f"{w},1.0\n" for w in range(400, 2500)))
    (s,) = read_spectra_csv(tmp_path / "a.csv", unit="absorbance")
    np.testing.assert_allclose(s.values, 0.1, atol=1e-15)
    with pytest.raises(SpectrumError):
        read_spectra_csv(tmp_path / "a.csv", unit="percent")


def test_cache_round_trip(tmp_path):
    spectra = [Spectrum.full(np.full(N_WL, 0.5), "a"), partial(400, 1099, 0.125)]
    spectra[1] = Spectrum(spectra[1].values, spectra[1].mask, "b")
    write_cache(tmp_path / "c.bin", spectra)
    back = read_cache(tmp_path / "c.bin")
    assert [s.meta for s in back] == ["a", "b"]
    for s, b in zip(spectra, back):
        assert np.array_equal(s.mask, b.mask)
        np.testing.assert_array_equal(s.values, b.values)
