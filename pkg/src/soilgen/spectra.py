"""Canonical spectral data model shared by every other module.

All spectra live on a 400..2499 nm grid at 1 nm (2100 slots). Missing
wavelengths are stored as exact zeros together with a boolean mask.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import savgol_filter

WL_MIN = 400
WL_MAX = 2499
N_WL = WL_MAX - WL_MIN + 1  # 2100
BAND_WIDTH = 50
N_BANDS = N_WL // BAND_WIDTH  # 42
COARSE_STEP = 4
N_COARSE = N_WL // COARSE_STEP  # 525

WAVELENGTHS = np.arange(WL_MIN, WL_MAX + 1, dtype=np.float64)
COARSE_WAVELENGTHS = WAVELENGTHS[::COARSE_STEP]


class SpectrumError(ValueError):
    """Raised for spectra that violate the canonical grid contract."""


@dataclass(frozen=True)
class Spectrum:
    """Reflectance fractions on the canonical grid plus a measured mask."""

    values: np.ndarray
    mask: np.ndarray
    meta: str | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=bool)
        if values.shape != (N_WL,) or mask.shape != (N_WL,):
            raise SpectrumError(
                f"expected {N_WL} values and mask entries, got {values.shape} and {mask.shape}"
            )
        if not mask.any():
            raise SpectrumError("spectrum has no measured wavelengths")
        idx = np.flatnonzero(mask)
        if idx[-1] - idx[0] + 1 != idx.size:
            raise SpectrumError("measured region must be one contiguous run")
        first, last = WL_MIN + idx[0], WL_MIN + idx[-1]
        if first % BAND_WIDTH or (last + 1) % BAND_WIDTH:
            raise SpectrumError(
                f"measured range {first}-{last} nm does not start/end on 50 nm boundaries"
            )
        if np.any(values[~mask] != 0.0):
            raise SpectrumError("values outside the measured region must be exactly 0")
        values = values.copy()
        mask = mask.copy()
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, values, meta=None) -> "Spectrum":
        return cls(np.asarray(values, dtype=np.float64), np.ones(N_WL, dtype=bool), meta)

    @classmethod
    def from_array(cls, row, meta=None) -> "Spectrum":
        """Build from a 2100-vector where NaN marks missing wavelengths."""
        row = np.asarray(row, dtype=np.float64)
        mask = ~np.isnan(row)
        return cls(np.where(mask, row, 0.0), mask, meta)

    def to_array(self) -> np.ndarray:
        """Values with NaN at unmeasured wavelengths."""
        return np.where(self.mask, self.values, np.nan)

    @property
    def is_full(self) -> bool:
        return bool(self.mask.all())

    @property
    def measured_range(self) -> tuple[int, int]:
        idx = np.flatnonzero(self.mask)
        return WL_MIN + int(idx[0]), WL_MIN + int(idx[-1])

    def covers(self, lo: int, hi: int) -> bool:
        first, last = self.measured_range
        return first <= lo and last >= hi


@dataclass(frozen=True)
class WavebandTensor:
    bands: np.ndarray  # (42, 50)
    band_mask: np.ndarray  # (42,)

    def flatten(self) -> np.ndarray:
        return self.bands.reshape(-1)


@dataclass(frozen=True)
class CoarseSpectrum:
    values: np.ndarray = field(default_factory=lambda: np.zeros(N_COARSE))

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_COARSE,):
            raise SpectrumError(f"coarse spectrum needs {N_COARSE} values, got {values.shape}")
        object.__setattr__(self, "values", values)


def wl_index(wavelength: int) -> int:
    return int(wavelength) - WL_MIN


# ---------------------------------------------------------------- conversions


def absorbance_to_reflectance(a):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise SpectrumError("absorbance must be finite")
    out = 1.0 / 10.0**a
    return float(out) if out.ndim == 0 else out


def reflectance_to_absorbance(r):
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise SpectrumError("reflectance must be finite and positive")
    out = -np.log10(r)
    return float(out) if out.ndim == 0 else out


def trim_to_canonical(wavelengths, values, meta=None) -> Spectrum:
    """Resample raw (wavelength, reflectance) pairs onto the canonical grid.

    The retained range starts at the first multiple of 50 nm at or above the
    first usable wavelength and ends one nanometre before a multiple of 50.
    """
    wl = np.asarray(wavelengths, dtype=np.float64)
    val = np.asarray(values, dtype=np.float64)
    if wl.ndim != 1 or wl.shape != val.shape or wl.size < 2:
        raise SpectrumError("need at least two (wavelength, value) pairs of equal length")
    if np.any(np.diff(wl) <= 0):
        raise SpectrumError("wavelengths must be strictly increasing")

    lo = max(np.ceil(wl[0]), WL_MIN)
    hi = min(np.floor(wl[-1]), WL_MAX)
    lo = int(np.ceil(lo / BAND_WIDTH) * BAND_WIDTH)
    hi = int(np.floor((hi + 1) / BAND_WIDTH) * BAND_WIDTH) - 1
    if hi < lo:
        raise SpectrumError(
            f"raw range {wl[0]:g}-{wl[-1]:g} nm leaves no full 50 nm band inside {WL_MIN}-{WL_MAX} nm"
        )

    grid = np.arange(lo, hi + 1, dtype=np.float64)
    out = np.zeros(N_WL)
    mask = np.zeros(N_WL, dtype=bool)
    out[lo - WL_MIN : hi - WL_MIN + 1] = np.interp(grid, wl, val)
    mask[lo - WL_MIN : hi - WL_MIN + 1] = True
    return Spectrum(out, mask, meta)


def reshape_to_wavebands(s: Spectrum) -> WavebandTensor:
    bands = s.values.reshape(N_BANDS, BAND_WIDTH).copy()
    band_mask = s.mask.reshape(N_BANDS, BAND_WIDTH).all(axis=1)
    bands[~band_mask] = 0.0
    return WavebandTensor(bands, band_mask)


def downsample_4nm(s: Spectrum) -> CoarseSpectrum:
    if not s.is_full:
        raise SpectrumError("downsampling requires a full-range spectrum")
    return CoarseSpectrum(s.values[::COARSE_STEP].copy())


def upsample_linear(c: CoarseSpectrum | np.ndarray) -> Spectrum:
    """Linear interpolation of the 4 nm grid back to 1 nm.

    The last knot sits at 2496 nm; 2497-2499 continue the final segment slope.
    """
    coarse = c.values if isinstance(c, CoarseSpectrum) else np.asarray(c, dtype=np.float64)
    return Spectrum.full(_upsample_values(coarse))


def _upsample_values(coarse: np.ndarray) -> np.ndarray:
    coarse = np.asarray(coarse, dtype=np.float64)
    out = np.interp(WAVELENGTHS, COARSE_WAVELENGTHS, coarse, right=np.nan)
    tail = WAVELENGTHS > COARSE_WAVELENGTHS[-1]
    slope = (coarse[-1] - coarse[-2]) / COARSE_STEP
    out[tail] = coarse[-1] + slope * (WAVELENGTHS[tail] - COARSE_WAVELENGTHS[-1])
    return out


def window_samples(window_nm: int) -> int:
    """Sample count for a window given in nm; even widths round up to odd."""
    n = int(window_nm)
    return n if n % 2 else n + 1


def savgol_smooth(s: Spectrum, window_nm: int = 100, order: int = 2, edge: str = "interp") -> Spectrum:
    if not s.is_full:
        raise SpectrumError("smoothing requires a full-range spectrum")
    return Spectrum.full(savgol_values(s.values, window_nm, order, edge), s.meta)


def savgol_values(values: np.ndarray, window_nm: int = 100, order: int = 2, edge: str = "interp") -> np.ndarray:
    """Savitzky-Golay smoothing along the last axis.

    ``edge="interp"`` fits the polynomial to the first/last full window, so
    polynomials up to ``order`` pass through unchanged everywhere;
    ``edge="mirror"`` reflects the signal about the end samples instead.
    """
    if edge not in ("interp", "mirror"):
        raise SpectrumError(f"unknown edge mode {edge!r}")
    window = window_samples(window_nm)
    values = np.asarray(values, dtype=np.float64)
    if window > values.shape[-1]:
        raise SpectrumError(f"window of {window} samples exceeds spectrum length {values.shape[-1]}")
    if order >= window:
        raise SpectrumError("polynomial order must be smaller than the window")
    return savgol_filter(values, window, order, mode=edge, axis=-1)


# ---------------------------------------------------------------------- I/O


def stack(spectra: Sequence[Spectrum]) -> tuple[np.ndarray, np.ndarray]:
    values = np.stack([s.values for s in spectra]) if spectra else np.zeros((0, N_WL))
    masks = np.stack([s.mask for s in spectra]) if spectra else np.zeros((0, N_WL), bool)
    return values, masks


def read_spectra_csv(path, unit: str = "reflectance") -> list[Spectrum]:
    """Read `wavelength_nm,<id>...` columns; blank cells are missing."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "wavelength_nm":
        raise SpectrumError(f"{path}: first header cell must be 'wavelength_nm'")
    ids = [h.strip() for h in rows[0][1:]]
    wl = []
    cols: list[list[float]] = [[] for _ in ids]
    for row in rows[1:]:
        if not row or not row[0].strip():
            continue
        wl.append(float(row[0]))
        for j in range(len(ids)):
            cell = row[j + 1].strip() if j + 1 < len(row) else ""
            cols[j].append(float(cell) if cell else np.nan)
    wl_arr = np.asarray(wl)
    out = []
    for sid, col in zip(ids, cols):
        col_arr = np.asarray(col)
        ok = ~np.isnan(col_arr)
        v = col_arr[ok]
        if unit == "absorbance":
            v = absorbance_to_reflectance(v)
        elif unit != "reflectance":
            raise SpectrumError(f"unknown unit {unit!r}")
        out.append(trim_to_canonical(wl_arr[ok], v, meta=sid))
    return out


def write_spectra_csv(path, spectra: Sequence[Spectrum], ids: Iterable[str] | None = None):
    ids = list(ids) if ids is not None else [s.meta or f"s{i}" for i, s in enumerate(spectra)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["wavelength_nm", *ids])
    for k in range(N_WL):
        w.writerow([WL_MIN + k, *(repr(float(s.values[k])) if s.mask[k] else "" for s in spectra)])
    Path(path).write_text(buf.getvalue())


def _mask_runs(mask: np.ndarray) -> list[int]:
    """[start_index, length] of the single measured run."""
    idx = np.flatnonzero(mask)
    return [int(idx[0]), int(idx.size)]


def write_cache(path, spectra: Sequence[Spectrum]):
    """JSON header line, then little-endian float32 N x 2100 payload."""
    header = {
        "count": len(spectra),
        "ids": [s.meta for s in spectra],
        "mask_runs": [_mask_runs(s.mask) for s in spectra],
    }
    payload = np.stack([s.values for s in spectra]).astype("<f4").tobytes(order="C")
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def read_cache(path) -> list[Spectrum]:
    data = Path(path).read_bytes()
    (n_head,) = struct.unpack_from("<Q", data, 0)
    header = json.loads(data[8 : 8 + n_head])
    arr = np.frombuffer(data, dtype="<f4", offset=8 + n_head).reshape(header["count"], N_WL)
    out = []
    for row, sid, (start, length) in zip(arr, header["ids"], header["mask_runs"]):
        mask = np.zeros(N_WL, dtype=bool)
        mask[start : start + length] = True
        out.append(Spectrum(np.where(mask, row.astype(np.float64), 0.0), mask, sid))
    return out
