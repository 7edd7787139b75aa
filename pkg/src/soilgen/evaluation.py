"""Error metrics, evaluation protocols and synthetic toy corpora."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .spectra import N_WL, WAVELENGTHS, WL_MIN, Spectrum, write_spectra_csv
from .text import property_name

MANUFACTURER = "spectrometer manufacturer"

# Named ablation subsets: each group lists required properties, each
# requirement a tuple of accepted spellings (lowercase text before the colon).
PROPERTY_GROUPS = {
    "particle": (("clay",), ("silt",), ("sand",)),
    "oc": (("organic carbon content",),),
    "fe": (("total iron content",),),
    "mg": (("total magnesium content",),),
    "ni": (("total nickel content",),),
    "density": (("bulk density",),),
    "n": (("total nitrogen content",),),
    "som": (("soil organic matter", "soil organic matter content"),),
    "caco3": (("caco3 content",),),
}

PADDING_BANDS = ((400, 799), (400, 1099), (2100, 2499))


# -------------------------------------------------------------------- metrics


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ValueError(f"grid mismatch: {pred.shape} vs {truth.shape}")
    return pred, truth


def rmse_pair(pred, truth) -> float:
    """Root mean square error in percent reflectance."""
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)) * 100.0)


def r2_pair(pred, truth) -> float:
    """Squared Pearson correlation across wavelengths."""
    pred, truth = _pair(pred, truth)
    dt = truth - truth.mean()
    dp = pred - pred.mean()
    stt, spp = np.dot(dt, dt), np.dot(dp, dp)
    if stt == 0 or np.ptp(truth) == 0:
        raise ValueError("correlation undefined: truth has zero variance")
    if spp == 0 or np.ptp(pred) == 0:
        raise ValueError("correlation undefined: prediction has zero variance")
    stp = np.dot(dt, dp)
    return float(min(stp * stp / (stt * spp), 1.0))


@dataclass
class EvalReport:
    rmse_i: list[float]
    r2_i: list[float]
    protocol: dict = field(default_factory=dict)
    skipped: int = 0

    @property
    def n(self) -> int:
        return len(self.rmse_i)

    @property
    def rmse(self) -> float:
        return float(np.mean(self.rmse_i)) if self.rmse_i else float("nan")

    @property
    def r2(self) -> float:
        return float(np.mean(self.r2_i)) if self.r2_i else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(n=self.n, rmse=self.rmse, r2=self.r2)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(list(d["rmse_i"]), list(d["r2_i"]), dict(d.get("protocol", {})), int(d.get("skipped", 0)))


def evaluate_pairs(pred, truth, protocol=None, region: slice | np.ndarray | None = None) -> EvalReport:
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    if pred.shape != truth.shape:
        raise ValueError(f"grid mismatch: {pred.shape} vs {truth.shape}")
    if region is not None:
        pred, truth = pred[:, region], truth[:, region]
    rm = [rmse_pair(p, t) for p, t in zip(pred, truth)]
    r2 = [r2_pair(p, t) for p, t in zip(pred, truth)]
    return EvalReport(rm, r2, dict(protocol or {}))


def dataset_metrics(pred, truth) -> EvalReport:
    return evaluate_pairs(pred, truth)


def reports_table(rows: Mapping[str, EvalReport]) -> str:
    """CSV with one row per protocol entry: label, RMSE (%), r2, n."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "rmse_percent", "r2", "n", "skipped"])
    for label, rep in rows.items():
        w.writerow([label, f"{rep.rmse:.2f}", f"{rep.r2:.2f}", rep.n, rep.skipped])
    return buf.getvalue()


def write_reports(path, rows: Mapping[str, EvalReport]):
    path = Path(path)
    path.write_text(json.dumps({k: v.to_dict() for k, v in rows.items()}, indent=2, sort_keys=True))
    path.with_suffix(".csv").write_text(reports_table(rows))


def plot_overlay_svg(path, truth, pred, labels=("true", "predicted"), band=None, std=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for row in np.atleast_2d(truth):
        ax.plot(WAVELENGTHS, row, color="k", lw=1, label=labels[0])
    for k, row in enumerate(np.atleast_2d(pred)):
        ax.plot(WAVELENGTHS, row, color="C1", lw=1, ls="--", label=labels[1])
        if std is not None:
            s = np.atleast_2d(std)[k]
            ax.fill_between(WAVELENGTHS, row - s, row + s, color="C1", alpha=0.25, lw=0)
    if band is not None:
        ax.axvspan(band[0], band[1], color="0.85", zorder=0)
    handles, names = ax.get_legend_handles_labels()
    uniq = dict(zip(names, handles))
    ax.legend(uniq.values(), uniq.keys(), frameon=False)
    ax.set_xlabel("Wavelength (nm)")
    ax.set_ylabel("Reflectance")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# --------------------------------------------------------- padding protocol


def band_slice(lo: int, hi: int) -> slice:
    return slice(lo - WL_MIN, hi - WL_MIN + 1)


def zero_band(s: Spectrum, lo: int, hi: int) -> np.ndarray:
    """Copy of s as a NaN-gapped array with [lo, hi] nm removed."""
    row = s.to_array()
    row[band_slice(lo, hi)] = np.nan
    return row


def run_padding_protocol(spectra: Sequence[Spectrum], padder, bands=PADDING_BANDS) -> dict[str, EvalReport]:
    """Remove each band, reconstruct it, and score only the removed range."""
    out = {}
    for lo, hi in bands:
        keep = [s for s in spectra if s.covers(lo, hi)]
        sl = band_slice(lo, hi)
        proto = {"name": "padding", "band_nm": [lo, hi]}
        if not keep:
            out[f"{lo}-{hi} nm"] = EvalReport([], [], proto, skipped=len(spectra))
            continue
        gapped = np.stack([zero_band(s, lo, hi) for s in keep])
        recon = np.asarray(padder.transform(gapped))
        rep = evaluate_pairs(recon, np.stack([s.values for s in keep]), proto, region=sl)
        rep.skipped = len(spectra) - len(keep)
        out[f"{lo}-{hi} nm"] = rep
    return out


# -------------------------------------------------------- ablation protocol


@dataclass(frozen=True)
class AblationSpec:
    """mode: 'all' | 'drop_manufacturer' | 'drop_random' (with k) | 'subset' (with names)."""

    mode: str = "all"
    k: int = 1
    names: tuple[str, ...] = ()
    keep_manufacturer: bool = True

    def __post_init__(self):
        if self.mode not in ("all", "drop_manufacturer", "drop_random", "subset"):
            raise ValueError(f"unknown ablation mode {self.mode!r}")
        if self.mode == "drop_random" and self.k not in (1, 2):
            raise ValueError("drop_random supports k in {1, 2}")
        if self.mode == "subset" and not self.names:
            raise ValueError("subset ablation needs property names")

    @classmethod
    def parse(cls, label: str) -> "AblationSpec":
        """Table-style labels: 'All', '- Manufacturer', '- 1', '- 2', 'Particle & OC'."""
        lab = label.strip()
        low = lab.lower().replace(" ", "")
        if low == "all":
            return cls("all")
        if low == "-manufacturer":
            return cls("drop_manufacturer")
        if low in ("-1", "-2"):
            return cls("drop_random", k=int(low[1]))
        return cls("subset", names=tuple(p.strip() for p in lab.split("&")))

    @property
    def label(self) -> str:
        return {"all": "All", "drop_manufacturer": "- Manufacturer",
                "drop_random": f"- {self.k}"}.get(self.mode) or " & ".join(self.names)


def apply_ablation(sentences: Sequence[str], spec: AblationSpec, rng: np.random.Generator) -> list[str] | None:
    """Property subset for one sample, or None when the sample must be skipped."""
    sentences = list(sentences)
    maker = [s for s in sentences if property_name(s) == MANUFACTURER]
    soil = [s for s in sentences if property_name(s) != MANUFACTURER]
    if spec.mode == "all":
        return sentences
    if spec.mode == "drop_manufacturer":
        return soil if soil else None
    if spec.mode == "drop_random":
        # dropping is skipped when it would leave a single soil property
        if len(soil) - spec.k < 2:
            return sentences
        drop = set(rng.choice(len(soil), size=spec.k, replace=False).tolist())
        return maker + [s for i, s in enumerate(soil) if i not in drop]
    chosen = []
    for name in spec.names:
        for spellings in PROPERTY_GROUPS.get(name.lower(), ((name.lower(),),)):
            hits = [x for x in soil if property_name(x) in spellings]
            if not hits:
                return None
            chosen += hits
    return (maker if spec.keep_manufacturer else []) + chosen


def run_ablation_protocol(property_sets, spectra, generator: Callable, spec: AblationSpec, seeds=10,
                          padder=None, rng_seed=0) -> EvalReport:
    """Score mean-of-seeds generations against true spectra under a property ablation.

    ``generator(list_of_property_sets, seeds)`` returns one mean spectrum per set
    (e.g. ``lambda P, s: sogm.predict(P)`` or a wrapper around generate_many).
    """
    rng = np.random.default_rng(rng_seed)
    seeds = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    subsets, keep = [], []
    for i, sents in enumerate(property_sets):
        sub = apply_ablation(sents, spec, rng)
        if sub:
            subsets.append(sub)
            keep.append(i)
    proto = {"name": "ablation", "spec": spec.label, "seeds": len(seeds)}
    if not keep:
        return EvalReport([], [], proto, skipped=len(property_sets))
    truth = []
    for i in keep:
        s = spectra[i]
        if isinstance(s, Spectrum):
            s = s.values if s.is_full else _pad_one(s, padder)
        truth.append(np.asarray(s, dtype=np.float64))
    pred = np.asarray(generator(subsets, seeds))
    rep = evaluate_pairs(pred, np.stack(truth), proto)
    rep.skipped = len(property_sets) - len(keep)
    return rep


def _pad_one(s: Spectrum, padder) -> np.ndarray:
    if padder is None:
        raise ValueError("truth spectrum is partial and no padding model was given")
    return np.asarray(padder.transform(s.to_array()[None]))[0]


# ------------------------------------------------------------- toy corpora

_U = (WAVELENGTHS - WL_MIN) / (N_WL - 1)


def _gauss(center, width):
    return np.exp(-0.5 * ((WAVELENGTHS - center) / width) ** 2)


TOY_BASIS = {
    "level": np.ones(N_WL),
    "slope": _U,
    "depth": -_gauss(1400.0, 40.0),
}
# fixed background shape shared by every toy spectrum
TOY_BACKGROUND = -0.05 * _gauss(1900.0, 50.0) - 0.02 * _gauss(2200.0, 30.0) - 0.08 * np.exp(-(WAVELENGTHS - WL_MIN) / 120.0)


@dataclass(frozen=True)
class ToyProperty:
    name: str
    unit: str
    lo: float
    hi: float
    controls: str  # key of TOY_BASIS
    intercept: float
    gain: float

    def parameter(self, value: float) -> float:
        return self.intercept + self.gain * value

    def sentence(self, value: float) -> str:
        return f"{self.name}: {value:.1f} {self.unit}"


TOY_PROPERTIES = (
    ToyProperty("Organic carbon content", "g/kg", 2.0, 40.0, "level", 0.42, -0.006),
    ToyProperty("Total iron content", "%", 0.5, 6.0, "slope", 0.30, -0.03),
    ToyProperty("Clay", "%", 5.0, 60.0, "depth", 0.0, 0.0015),
)


@dataclass(frozen=True)
class ToyCorpusSpec:
    count: int = 2000
    seed: int = 0
    noise_std: float = 0.002
    properties: tuple[ToyProperty, ...] = TOY_PROPERTIES


@dataclass
class ToyCorpus:
    spectra: np.ndarray  # (n, 2100)
    property_sets: list[list[str]]
    values: np.ndarray  # (n, n_props) rounded property values
    params: np.ndarray  # (n, n_props) generator parameters
    spec: ToyCorpusSpec


def toy_curve(params: Mapping[str, float]) -> np.ndarray:
    """Closed-form toy spectrum for parameters keyed like TOY_BASIS."""
    out = TOY_BACKGROUND.copy()
    for key, basis in TOY_BASIS.items():
        out = out + params.get(key, 0.0) * basis
    return out


def toy_spectrum_from_values(values: Sequence[float], props=TOY_PROPERTIES) -> np.ndarray:
    return toy_curve({p.controls: p.parameter(v) for p, v in zip(props, values)})


def make_toy_corpus(spec: ToyCorpusSpec = ToyCorpusSpec()) -> ToyCorpus:
    rng = np.random.default_rng(spec.seed)
    props = spec.properties
    values = np.round(np.column_stack([rng.uniform(p.lo, p.hi, spec.count) for p in props]), 1)
    params = np.column_stack([[p.parameter(v) for v in values[:, j]] for j, p in enumerate(props)])
    spectra = np.stack([toy_spectrum_from_values(v, props) for v in values])
    if spec.noise_std > 0:
        spectra = spectra + rng.normal(0.0, spec.noise_std, spectra.shape)
    sets = [[p.sentence(v) for p, v in zip(props, row)] for row in values]
    return ToyCorpus(spectra, sets, values, params, spec)


def refit_toy_params(spectrum: np.ndarray, props=TOY_PROPERTIES) -> np.ndarray:
    """Least-squares recovery of the generator parameters from one spectrum."""
    A = np.column_stack([TOY_BASIS[p.controls] for p in props])
    coef, *_ = np.linalg.lstsq(A, np.asarray(spectrum) - TOY_BACKGROUND, rcond=None)
    return coef


def toy_wet(dry: np.ndarray, smc_g) -> np.ndarray:
    """Known darkening law: multiplicative darkening that saturates with moisture,
    stronger in the 1450 and 1940 nm water bands."""
    smc = np.asarray(smc_g, dtype=np.float64)[..., None]
    frac = smc / (smc + 25.0)
    water = 0.5 + 0.3 * _gauss(1450.0, 60.0) + 0.45 * _gauss(1940.0, 70.0)
    return dry * (1.0 - frac * np.minimum(water, 0.95))


def make_toy_wet_corpus(count=1670, seed=0, smc_max=40.0, zero_fraction=0.15, noise_std=0.0):
    """(dry, smc_g, wet) arrays; a fraction of rows has smc_g = 0 (identity pairs)."""
    base = make_toy_corpus(ToyCorpusSpec(count=count, seed=seed, noise_std=noise_std))
    rng = np.random.default_rng(seed + 1)
    smc = np.round(rng.uniform(0.0, smc_max, count), 1)
    smc[rng.random(count) < zero_fraction] = 0.0
    return base.spectra, smc, toy_wet(base.spectra, smc)


def write_toy_corpus(out_dir, corpus: ToyCorpus, force=False, wet=None) -> Path:
    """Spectra CSV + property JSON + ground truth JSON + manifest; returns the manifest path.

    ``wet`` is an optional (dry, smc_g, wet) triple from make_toy_wet_corpus,
    written as a wet/dry pair set in the same manifest.
    """
    from .corpus import write_manifest

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ["spectra.csv", "properties.json", "ground_truth.json", "manifest.json"]
    if wet is not None:
        names += ["wet_dry.csv", "wet_wet.csv", "wet_pairs.json"]
    for name in names:
        _guard(out / name, force)
    ids = [f"toy{i:05d}" for i in range(len(corpus.spectra))]
    spectra = [Spectrum.full(row, sid) for row, sid in zip(corpus.spectra, ids)]
    write_spectra_csv(out / "spectra.csv", spectra, ids)
    props = [{"id": sid, "sentences": sents} for sid, sents in zip(ids, corpus.property_sets)]
    (out / "properties.json").write_text(json.dumps(props, indent=1))
    truth = {
        "basis": {p.name: p.controls for p in corpus.spec.properties},
        "count": int(corpus.spec.count), "seed": int(corpus.spec.seed), "noise_std": corpus.spec.noise_std,
        "samples": [{"id": sid, "values": v.tolist(), "params": q.tolist()}
                    for sid, v, q in zip(ids, corpus.values, corpus.params)],
    }
    (out / "ground_truth.json").write_text(json.dumps(truth, indent=1))
    wet_entries = []
    if wet is not None:
        dry, smc, wetv = wet
        wid = [f"pair{i:05d}" for i in range(len(dry))]
        write_spectra_csv(out / "wet_dry.csv", [Spectrum.full(r, i) for r, i in zip(dry, wid)], wid)
        write_spectra_csv(out / "wet_wet.csv", [Spectrum.full(r, i) for r, i in zip(wetv, wid)], wid)
        pairs = [{"dry": i, "wet": i, "smc_g": float(m)} for i, m in zip(wid, smc)]
        (out / "wet_pairs.json").write_text(json.dumps(pairs, indent=1))
        wet_entries.append({"name": "toy-wet", "dry": "wet_dry.csv", "wet": "wet_wet.csv",
                            "pairs": "wet_pairs.json"})
    return write_manifest(out / "manifest.json", [{"spectra": "spectra.csv", "unit": "reflectance",
                                                    "properties": "properties.json", "name": "toy"}],
                          wet_entries, force=True)


def _guard(path: Path, force: bool):
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
