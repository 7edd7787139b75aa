"""Corpus manifests tying spectra CSVs to property files.

A manifest is JSON::

    {"format": "soilgen-corpus", "version": 1,
     "datasets": [{"name": "toy", "spectra": "spectra.csv", "unit": "reflectance",
                   "properties": "properties.json"}],
     "wet": [{"name": "marmit", "dry": "dry.csv", "wet": "wet.csv", "pairs": "pairs.json"}]}

Paths are relative to the manifest. A property file is a JSON list of
``{"id": <spectrum column>, "sentences": [...]}``; entries without an id are
matched to spectra by position. A pairs file lists
``{"dry": <id>, "wet": <id>, "smc_g": <percent>}``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectra import Spectrum, read_spectra_csv

FORMAT = "soilgen-corpus"


class CorpusError(ValueError):
    pass


@dataclass
class Corpus:
    spectra: list[Spectrum]
    property_sets: list[list[str]]
    datasets: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.spectra)

    @property
    def ids(self) -> list[str]:
        return [s.meta or "" for s in self.spectra]

    def full_range(self) -> "Corpus":
        keep = [i for i, s in enumerate(self.spectra) if s.is_full]
        return Corpus([self.spectra[i] for i in keep], [self.property_sets[i] for i in keep],
                      [self.datasets[i] for i in keep])

    def values(self) -> np.ndarray:
        return np.stack([s.values for s in self.spectra])


def write_manifest(path, datasets, wet=(), force=False) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    path.write_text(json.dumps({"format": FORMAT, "version": 1, "datasets": list(datasets),
                                "wet": list(wet)}, indent=2))
    return path


def _read_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing corpus manifest: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != FORMAT:
        raise CorpusError(f"{path} is not a {FORMAT} manifest")
    return path.parent, doc


def load_properties(path, ids) -> list[list[str]]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise CorpusError(f"{path}: property file must be a JSON list")
    by_id = {e["id"]: e["sentences"] for e in entries if "id" in e}
    if by_id:
        return [list(by_id.get(i, [])) for i in ids]
    if len(entries) != len(ids):
        raise CorpusError(f"{path}: {len(entries)} property entries for {len(ids)} spectra")
    return [list(e["sentences"]) for e in entries]


def load_corpus(manifest) -> Corpus:
    root, doc = _read_manifest(manifest)
    spectra, props, names = [], [], []
    for ds in doc.get("datasets", []):
        unit = ds.get("unit", "reflectance")
        sp = read_spectra_csv(root / ds["spectra"], unit=unit)
        ids = [s.meta for s in sp]
        if "properties" in ds:
            pr = load_properties(root / ds["properties"], ids)
        else:
            pr = [[] for _ in sp]
        maker = ds.get("manufacturer")
        if maker:
            pr = [[f"Spectrometer manufacturer: {maker}", *p] for p in pr]
        spectra += sp
        props += pr
        names += [ds.get("name", "")] * len(sp)
    if not spectra:
        raise CorpusError(f"corpus {manifest} is empty")
    return Corpus(spectra, props, names)


def load_wet_corpus(manifest):
    """List of WetSample from the manifest's `wet` section."""
    from .wet import WetSample

    root, doc = _read_manifest(manifest)
    samples = []
    for ds in doc.get("wet", []):
        dry = {s.meta: s for s in read_spectra_csv(root / ds["dry"])}
        wet = {s.meta: s for s in read_spectra_csv(root / ds["wet"])}
        for pair in json.loads((root / ds["pairs"]).read_text()):
            samples.append(WetSample(dry[pair["dry"]], float(pair["smc_g"]), wet[pair["wet"]]))
    if not samples:
        raise CorpusError(f"corpus {manifest} has no wet/dry pairs")
    return samples
