"""Band integration against camera/source spectra and flat-soil image rendering."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .spectra import N_WL, WAVELENGTHS, WL_MAX, WL_MIN, Spectrum


class DegenerateBandError(ValueError):
    pass


@dataclass(frozen=True)
class Table:
    """Piecewise-linear spectral quantity sampled at ascending wavelengths (nm)."""

    wavelengths: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.asarray(self.wavelengths, dtype=np.float64)
        v = np.asarray(self.values, dtype=np.float64)
        if wl.ndim != 1 or wl.shape != v.shape or wl.size < 2:
            raise ValueError("a spectral table needs >= 2 wavelengths and matching values")
        if np.any(np.diff(wl) <= 0):
            raise ValueError("table wavelengths must be strictly ascending")
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, value, lo=WL_MIN, hi=WL_MAX):
        return cls(np.array([lo, hi], float), np.array([value, value], float))

    @classmethod
    def from_spectrum(cls, s: Spectrum | np.ndarray):
        values = s.values if isinstance(s, Spectrum) else np.asarray(s, dtype=np.float64)
        if isinstance(s, Spectrum) and not s.is_full:
            first, last = s.measured_range
            sl = slice(first - WL_MIN, last - WL_MIN + 1)
            return cls(WAVELENGTHS[sl], values[sl])
        return cls(WAVELENGTHS, values)

    def __call__(self, x):
        return np.interp(x, self.wavelengths, self.values)

    @property
    def coverage(self) -> tuple[float, float]:
        return float(self.wavelengths[0]), float(self.wavelengths[-1])


def _as_table(x) -> Table:
    if isinstance(x, Table):
        return x
    if isinstance(x, (Spectrum, np.ndarray)) or np.ndim(x) == 1:
        return Table.from_spectrum(np.asarray(x) if not isinstance(x, Spectrum) else x)
    raise TypeError(f"cannot use {type(x).__name__} as a spectral table")


@dataclass(frozen=True)
class SourceSpectrum:
    table: Table

    def __post_init__(self):
        if np.any(self.table.values < 0):
            raise ValueError("source flux must be non-negative")

    @classmethod
    def flat(cls, lo=WL_MIN, hi=WL_MAX):
        return cls(Table.constant(1.0, lo, hi))


@dataclass(frozen=True)
class CameraResponse:
    channels: Mapping[str, Table]

    def __post_init__(self):
        if not self.channels:
            raise ValueError("camera response needs at least one channel")
        for name, t in self.channels.items():
            if np.any(t.values < 0):
                raise ValueError(f"channel {name!r} has negative sensitivity")

    @property
    def names(self) -> list[str]:
        return list(self.channels)

    @classmethod
    def flat(cls, names=("R", "G", "B"), lo=WL_MIN, hi=WL_MAX):
        return cls({n: Table.constant(1.0, lo, hi) for n in names})


def _grid(band, tables: Sequence[Table]) -> np.ndarray:
    lo, hi = float(band[0]), float(band[1])
    if not hi > lo:
        raise DegenerateBandError(f"band [{lo}, {hi}] is empty")
    for t in tables:
        a, b = t.coverage
        if lo < a or hi > b:
            raise ValueError(f"band [{lo:g}, {hi:g}] nm exceeds table coverage [{a:g}, {b:g}] nm")
    pts = [np.arange(math.ceil(lo), math.floor(hi) + 1, dtype=np.float64), np.array([lo, hi])]
    pts += [t.wavelengths[(t.wavelengths > lo) & (t.wavelengths < hi)] for t in tables]
    return np.unique(np.concatenate(pts))


def _integrate_product(grid, *tables: Table) -> float:
    """Exact integral of the product of piecewise-linear tables.

    Every factor is linear between consecutive grid points (the grid holds
    all knots), so the product is at most cubic there and Simpson's rule is
    exact.
    """
    mid = 0.5 * (grid[:-1] + grid[1:])
    f_at = lambda x: np.prod([t(x) for t in tables], axis=0)  # noqa: E731
    f = f_at(grid)
    fm = f_at(mid)
    h = np.diff(grid)
    return float(np.sum(h / 6.0 * (f[:-1] + 4.0 * fm + f[1:])))


def band_integral(quantity, c: Table, s: SourceSpectrum, band) -> tuple[float, float]:
    """(numerator, denominator) of the band-averaged quantity."""
    q = _as_table(quantity)
    grid = _grid(band, [q, c, s.table])
    return _integrate_product(grid, q, c, s.table), _integrate_product(grid, s.table)


def band_reflectivity(rho, c: Table, s: SourceSpectrum, band, normalize_by_cs: bool = False) -> float:
    """Integral of rho*C*S over the band divided by the integral of S.

    With ``normalize_by_cs`` the denominator becomes the integral of C*S,
    the conventional camera-normalized form.
    """
    q = _as_table(rho)
    grid = _grid(band, [q, c, s.table])
    num = _integrate_product(grid, q, c, s.table)
    den = _integrate_product(grid, c, s.table) if normalize_by_cs else _integrate_product(grid, s.table)
    if not den > 0:
        raise DegenerateBandError(f"no source energy in band [{band[0]}, {band[1]}] nm")
    return num / den


def band_transmissivity(tau, c: Table, s: SourceSpectrum, band, normalize_by_cs: bool = False) -> float:
    return band_reflectivity(tau, c, s, band, normalize_by_cs)


def channel_band(c: Table, threshold: float = 0.0) -> tuple[float, float]:
    """Wavelength span where a channel's sensitivity exceeds `threshold`, clipped to 400-2499."""
    on = np.flatnonzero(c.values > threshold)
    if on.size == 0:
        raise DegenerateBandError("channel has no sensitivity")
    lo = c.wavelengths[max(on[0] - 1, 0)]
    hi = c.wavelengths[min(on[-1] + 1, c.wavelengths.size - 1)]
    return max(float(lo), WL_MIN), min(float(hi), WL_MAX)


def channel_values(rho, camera: CameraResponse, source: SourceSpectrum, bands=None,
                   normalize_by_cs=False) -> np.ndarray:
    out = []
    for name, table in camera.channels.items():
        band = bands[name] if bands and name in bands else channel_band(table)
        lo, hi = band
        a, b = source.table.coverage
        out.append(band_reflectivity(rho, table, source, (max(lo, a), min(hi, b)), normalize_by_cs))
    return np.array(out)


# -------------------------------------------------------------------- scenes


@dataclass
class Patch:
    """Axis-aligned rectangle [x0, x1) x [y0, y1) in grid cells."""

    id: int
    rect: tuple[int, int, int, int]
    spectrum: Spectrum | None = None
    name: str = ""
    smc_g: float | None = None
    properties: list[str] = field(default_factory=list)
    band_values: Sequence[float] | None = None  # precomputed per-channel values override the spectrum


@dataclass
class SoilScene:
    grid: tuple[int, int]  # (columns, rows)
    patches: list[Patch]
    source: SourceSpectrum
    camera: CameraResponse
    width: int
    height: int
    zenith_deg: float = 0.0
    exposure: float = 1.0
    normalize_by_cs: bool = False

    def validate(self):
        if not self.patches:
            raise ValueError("scene has no patches")
        gx, gy = self.grid
        if self.width <= 0 or self.height <= 0 or gx <= 0 or gy <= 0:
            raise ValueError("scene dimensions must be positive")
        if not 0.0 <= self.zenith_deg < 90.0:
            raise ValueError("incidence zenith must lie in [0, 90) degrees")
        cover = np.zeros((gy, gx), dtype=np.int64)
        ids = set()
        for p in self.patches:
            if p.id in ids or p.id <= 0:
                raise ValueError(f"patch id {p.id} is duplicated or not positive")
            ids.add(p.id)
            x0, y0, x1, y1 = p.rect
            if not (0 <= x0 < x1 <= gx and 0 <= y0 < y1 <= gy):
                raise ValueError(f"patch {p.id} rectangle {p.rect} lies outside the {gx}x{gy} grid")
            cover[y0:y1, x0:x1] += 1
        if np.any(cover != 1):
            raise ValueError("patches must tile the grid: every cell covered exactly once")

    def label_map(self) -> np.ndarray:
        gx, gy = self.grid
        cells = np.zeros((gy, gx), dtype=np.int32)
        for p in self.patches:
            x0, y0, x1, y1 = p.rect
            cells[y0:y1, x0:x1] = p.id
        rows = (np.arange(self.height) * gy) // self.height
        cols = (np.arange(self.width) * gx) // self.width
        return cells[rows[:, None], cols[None, :]]


@dataclass
class RenderResult:
    raster: np.ndarray  # (H, W, C) float64
    image8: np.ndarray  # (H, W, C) uint8
    labels: np.ndarray  # (H, W) int32
    channels: list[str]
    patch_colors: dict[int, np.ndarray]
    legend: dict[int, dict]

    def lookup(self, key: str) -> np.ndarray:
        """Per-pixel metadata raster, e.g. lookup('smc_g'); NaN where unknown."""
        out = np.full(self.labels.shape, np.nan)
        for pid, entry in self.legend.items():
            v = entry.get(key)
            if v is not None:
                out[self.labels == pid] = v
        return out


_EXACT_COS = {0: 1.0, 60: 0.5, 90: 0.0, 120: -0.5, 180: -1.0, 240: -0.5, 270: 0.0, 300: 0.5}


def cosd(deg: float) -> float:
    """Cosine of an angle in degrees, exact where the value is rational."""
    r = float(deg) % 360.0
    if r in _EXACT_COS:
        return _EXACT_COS[r]
    return math.cos(math.radians(r))


def patch_band_values(p: Patch, scene: SoilScene) -> np.ndarray:
    if p.band_values is not None:
        vals = np.asarray(p.band_values, dtype=np.float64)
        if vals.shape != (len(scene.camera.names),):
            raise ValueError(f"patch {p.id} needs one band value per camera channel")
        return vals
    if p.spectrum is None:
        raise ValueError(f"patch {p.id} has neither a spectrum nor band values")
    return channel_values(p.spectrum, scene.camera, scene.source, normalize_by_cs=scene.normalize_by_cs)


def tone_map(raster: np.ndarray) -> np.ndarray:
    """Linear clamp to [0, 1] and scale to 0-255."""
    return np.rint(np.clip(raster, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_scene(scene: SoilScene) -> RenderResult:
    scene.validate()
    labels = scene.label_map()
    gain = cosd(scene.zenith_deg) * scene.exposure
    colors = {p.id: patch_band_values(p, scene) for p in scene.patches}
    lut = np.zeros((max(colors) + 1, len(scene.camera.names)))
    for pid, c in colors.items():
        lut[pid] = c * gain
    raster = lut[labels]
    legend = {p.id: {"name": p.name, "smc_g": p.smc_g, "properties": list(p.properties),
                     "rect": list(p.rect)} for p in scene.patches}
    return RenderResult(raster, tone_map(raster), labels, scene.camera.names, colors, legend)


def mean_patch_color(raster: np.ndarray, labels: np.ndarray, patch_id: int) -> np.ndarray:
    """Per-channel mean of an 8-bit-scale raster over one patch, scaled to 0-1."""
    sel = labels == patch_id
    if not sel.any():
        raise KeyError(f"patch {patch_id} is absent from the label map")
    return np.asarray(raster, dtype=np.float64)[sel].mean(axis=0) / 255.0


# ------------------------------------------------------------------------ I/O


def read_table_csv(path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and r[0].strip()]
    head = [h.strip() for h in rows[0]]
    if head[0] != "wavelength_nm" or len(head) < 2:
        raise ValueError(f"{path}: expected header 'wavelength_nm,<column>...'")
    data = np.array([[float(x) for x in r[: len(head)]] for r in rows[1:]])
    return data[:, 0], {h: data[:, j + 1] for j, h in enumerate(head[1:])}


def read_camera_csv(path) -> CameraResponse:
    wl, cols = read_table_csv(path)
    return CameraResponse({k: Table(wl, v) for k, v in cols.items()})


def read_source_csv(path) -> SourceSpectrum:
    wl, cols = read_table_csv(path)
    return SourceSpectrum(Table(wl, next(iter(cols.values()))))


def write_float_image(stem, raster: np.ndarray, channels: Sequence[str]):
    """`<stem>.f32` raw little-endian float32 (H, W, C) row-major + `<stem>.json` header."""
    stem = Path(stem)
    h, w, c = raster.shape
    stem.with_suffix(".f32").write_bytes(np.ascontiguousarray(raster, dtype="<f4").tobytes())
    header = {"format": "raw", "dtype": "float32", "byte_order": "little", "layout": "HWC",
              "height": h, "width": w, "channels": list(channels)}
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_float_image(stem) -> np.ndarray:
    stem = Path(stem)
    header = json.loads(stem.with_suffix(".json").read_text())
    arr = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    return arr.reshape(header["height"], header["width"], len(header["channels"]))


def write_png(path, image8: np.ndarray):
    from PIL import Image

    Image.fromarray(image8).save(path, format="PNG")


def write_label_png(path, labels: np.ndarray):
    from PIL import Image

    if labels.max() > 255:
        raise ValueError("indexed label PNG holds at most 255 patches")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    rng = np.random.default_rng(12345)
    palette = rng.integers(0, 256, size=(256, 3), dtype=np.uint8)
    palette[0] = 0
    img.putpalette(palette.reshape(-1).tolist())
    img.save(path, format="PNG")


def export_prosail_soil(s: Spectrum, path, include_2500: bool = False):
    """Two-column text table (wavelength nm, reflectance fraction) for 4SAIL-type R_soil input.

    Default rows cover 400-2499 nm (2100 rows); ``include_2500`` appends a
    2500 nm row repeating the 2499 nm value for consumers expecting 2101 rows.
    """
    if not s.is_full:
        raise ValueError("PROSAIL export needs a full-range spectrum")
    lines = [f"{WL_MIN + k} {float(s.values[k])!r}" for k in range(N_WL)]
    if include_2500:
        lines.append(f"{WL_MAX + 1} {float(s.values[-1])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_prosail_soil(path) -> tuple[np.ndarray, np.ndarray]:
    wl, vals = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        a, b = line.split()
        wl.append(int(a))
        vals.append(float(b))
    return np.array(wl), np.array(vals)
