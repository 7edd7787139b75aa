import numpy as np
import pytest

from soilgen.radiometry import (
    CameraResponse, DegenerateBandError, Patch, SoilScene, SourceSpectrum, Table, band_integral,
    band_reflectivity, band_transmissivity, channel_values, cosd, export_prosail_soil, mean_patch_color,
    read_float_image, read_prosail_soil, render_scene, write_float_image,
)
from soilgen.spectra import Spectrum


def random_table(rng, lo=400.0, hi=2499.0, n=40):
    inner = np.sort(rng.uniform(lo, hi, n - 2))
    return Table(np.r_[lo, inner, hi], rng.uniform(0.0, 1.0, n))


def oracle(rho, c, s, band, normalize_by_cs=False):
    """Brute-force trapezoid on a 0.01 nm grid."""
    x = np.linspace(band[0], band[1], int(round((band[1] - band[0]) / 0.01)) + 1)
    num = np.trapezoid(rho(x) * c(x) * s.table(x), x)
    den = np.trapezoid((c(x) if normalize_by_cs else 1.0) * s.table(x), x)
    return num / den


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("normalize_by_cs", [False, True])
def test_refinement_oracle(seed, normalize_by_cs):
    rng = np.random.default_rng(seed)
    rho = Table.from_spectrum(rng.uniform(0.05, 0.6, 2100))
    c, s = random_table(rng), SourceSpectrum(random_table(rng))
    lo = rng.uniform(400, 1500)
    band = (lo, lo + rng.uniform(50, 900))
    got = band_reflectivity(rho, c, s, band, normalize_by_cs)
    want = oracle(rho, c, s, band, normalize_by_cs)
    assert abs(got - want) / abs(want) < 1e-6
    tau = random_table(rng)
    assert abs(band_transmissivity(tau, c, s, band) - oracle(tau, c, s, band)) / oracle(tau, c, s, band) < 1e-6


def test_constant_examples():
    flat = SourceSpectrum.flat()
    one = Table.constant(1.0)
    band = (450.0, 650.0)
    assert band_reflectivity(Table.constant(0.5), one, flat, band) == pytest.approx(0.5, abs=1e-15)
    assert band_reflectivity(Table.constant(1.0), Table.constant(0.5), flat, band) == pytest.approx(0.5, abs=1e-15)
    assert band_reflectivity(Table.constant(1.0), Table.constant(0.5), flat, band, normalize_by_cs=True) \
        == pytest.approx(1.0, abs=1e-15)
    assert band_transmissivity(Table.constant(0.0), one, flat, band) == 0.0
    assert band_transmissivity(Table.constant(1.0), one, flat, band) == pytest.approx(1.0, abs=1e-15)


def test_degenerate_band():
    dark = SourceSpectrum(Table.constant(0.0))
    with pytest.raises(DegenerateBandError):
        band_reflectivity(Table.constant(0.5), Table.constant(1.0), dark, (500, 600))
    with pytest.raises(DegenerateBandError):
        band_reflectivity(Table.constant(0.5), Table.constant(1.0), SourceSpectrum.flat(), (600, 600))
    with pytest.raises(ValueError):
        band_reflectivity(Table.constant(0.5), Table.constant(1.0, 500, 900), SourceSpectrum.flat(), (400, 600))


def test_table_validation():
    with pytest.raises(ValueError):
        Table([500, 400], [0, 1])
    with pytest.raises(ValueError):
        SourceSpectrum(Table([400, 500], [1, -1]))
    with pytest.raises(ValueError):
        CameraResponse({})


def test_linearity_and_additivity():
    rng = np.random.default_rng(9)
    r1, r2 = (Table.from_spectrum(rng.uniform(0, 1, 2100)) for _ in range(2))
    mix = Table.from_spectrum(0.3 * r1.values + 1.7 * r2.values)
    c, s = random_table(rng), SourceSpectrum(random_table(rng))
    band = (420.3, 1810.7)
    lhs = band_reflectivity(mix, c, s, band)
    rhs = 0.3 * band_reflectivity(r1, c, s, band) + 1.7 * band_reflectivity(r2, c, s, band)
    assert abs(lhs - rhs) <= 1e-12
    whole = band_integral(r1, c, s, (500.0, 900.0))[0]
    parts = band_integral(r1, c, s, (500.0, 633.3))[0] + band_integral(r1, c, s, (633.3, 900.0))[0]
    assert abs(whole - parts) <= 1e-12 * abs(whole)


def test_channel_values_flat_camera():
    vals = channel_values(np.full(2100, 0.25), CameraResponse.flat(), SourceSpectrum.flat())
    np.testing.assert_allclose(vals, 0.25, rtol=0, atol=1e-15)


def scene(patches, grid=(2, 1), zenith=0.0, w=8, h=4):
    return SoilScene(grid, patches, SourceSpectrum.flat(), CameraResponse.flat(), w, h, zenith_deg=zenith)


def test_uniform_scene_exact():
    res = render_scene(scene([Patch(1, (0, 0, 2, 1), band_values=(0.3, 0.2, 0.1))]))
    assert res.raster.shape == (4, 8, 3)
    assert np.array_equal(res.raster, np.broadcast_to([0.3, 0.2, 0.1], (4, 8, 3)))
    assert np.array_equal(mean_patch_color(res.image8, res.labels, 1), np.rint(np.array([0.3, 0.2, 0.1]) * 255) / 255)


def test_zenith_sixty_halves():
    p = [Patch(1, (0, 0, 2, 1), band_values=(0.3, 0.2, 0.1))]
    assert cosd(60) == 0.5
    a, b = render_scene(scene(p)).raster, render_scene(scene(p, zenith=60.0)).raster
    assert np.array_equal(b, a / 2)
    with pytest.raises(ValueError):
        render_scene(scene(p, zenith=90.0))


def test_two_patch_labels_and_lookup():
    patches = [Patch(1, (0, 0, 1, 1), band_values=(0.1, 0.1, 0.1), smc_g=5.0),
               Patch(2, (1, 0, 2, 1), band_values=(0.4, 0.4, 0.4), smc_g=20.0)]
    res = render_scene(scene(patches, w=7, h=3))
    assert res.labels.shape == res.raster.shape[:2]
    assert (res.labels > 0).all()
    expect = np.where(np.arange(7) * 2 // 7 == 0, 1, 2)
    assert np.array_equal(res.labels, np.tile(expect, (3, 1)))
    smc = res.lookup("smc_g")
    assert np.array_equal(smc, np.where(res.labels == 1, 5.0, 20.0))


def test_scene_validation():
    with pytest.raises(ValueError):
        render_scene(scene([]))
    with pytest.raises(ValueError):  # gap in coverage
        render_scene(scene([Patch(1, (0, 0, 1, 1), band_values=(0, 0, 0))]))
    with pytest.raises(ValueError):  # overlap
        render_scene(scene([Patch(1, (0, 0, 2, 1), band_values=(0, 0, 0)),
                            Patch(2, (1, 0, 2, 1), band_values=(0, 0, 0))]))


def test_render_from_spectrum_and_determinism():
    s = Spectrum.full(np.linspace(0.1, 0.5, 2100))
    patches = [Patch(1, (0, 0, 2, 1), spectrum=s)]
    a, b = render_scene(scene(patches)), render_scene(scene(patches))
    assert np.array_equal(a.raster, b.raster) and np.array_equal(a.image8, b.image8)


def test_mean_patch_color():
    raster = np.zeros((2, 2, 1))
    raster[0] = 0.2 * 255
    raster[1] = 0.4 * 255
    labels = np.ones((2, 2), dtype=int)
    assert mean_patch_color(raster, labels, 1)[0] == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(KeyError):
        mean_patch_color(raster, labels, 3)


def test_float_image_round_trip(tmp_path):
    r = np.random.default_rng(0).random((3, 4, 3)).astype(np.float32)
    write_float_image(tmp_path / "img", r, ["R", "G", "B"])
    assert np.array_equal(read_float_image(tmp_path / "img"), r)


def test_prosail_export(tmp_path):
    export_prosail_soil(Spectrum.full(np.full(2100, 0.2)), tmp_path / "c.txt")
    wl, v = read_prosail_soil(tmp_path / "c.txt")
    assert len(v) == 2100 and (v == 0.2).all() and wl[0] == 400 and wl[-1] == 2499
    vals = np.random.default_rng(1).random(2100)
    export_prosail_soil(Spectrum.full(vals), tmp_path / "r.txt", include_2500=True)
    wl, v = read_prosail_soil(tmp_path / "r.txt")
    assert np.array_equal(v[:2100], vals) and wl[-1] == 2500 and v[-1] == vals[-1]
    # stub consumer enforcing the column contract
    for line in (tmp_path / "r.txt").read_text().splitlines():
        a, b = line.split()
        assert a.isdigit() and 0 <= float(b) <= 1
    with pytest.raises(ValueError):
        export_prosail_soil(Spectrum(np.full(2100, 0.2), np.arange(2100) < 100), tmp_path / "x.txt")
