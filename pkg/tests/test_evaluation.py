import copy
import math

import numpy as np
import pytest

from soilgen.evaluation import (
    PADDING_BANDS, AblationSpec, EvalReport, ToyCorpusSpec, apply_ablation, dataset_metrics, evaluate_pairs,
    make_toy_corpus, r2_pair, refit_toy_params, reports_table, rmse_pair, run_ablation_protocol,
    run_padding_protocol, toy_spectrum_from_values, write_reports, write_toy_corpus,
)
from soilgen.spectra import Spectrum


def rmse_loop(p, t):
    acc = 0.0
    for a, b in zip(p, t):
        acc += (a - b) ** 2
    return math.sqrt(acc / len(p)) * 100


def r2_loop(p, t):
    mp, mt = sum(p) / len(p), sum(t) / len(t)
    sxy = sxx = syy = 0.0
    for a, b in zip(p, t):
        sxy += (a - mp) * (b - mt)
        sxx += (a - mp) ** 2
        syy += (b - mt) ** 2
    return sxy * sxy / (sxx * syy)


def test_metric_examples():
    t = np.linspace(0.1, 0.5, 2100)
    assert rmse_pair(t, t) == 0.0
    assert rmse_pair(t + 0.05, t) == pytest.approx(5.0, abs=1e-12)
    assert r2_pair(t, t) == 1.0
    assert r2_pair(3.0 * t + 0.2, t) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        r2_pair(t, np.full(2100, 0.3))
    with pytest.raises(ValueError):
        rmse_pair(t[:10], t)


@pytest.mark.parametrize("seed", range(3))
def test_metrics_against_scalar_loops(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.random(2100), rng.random(2100)
    assert abs(rmse_pair(p, t) - rmse_loop(p.tolist(), t.tolist())) <= 1e-12
    assert abs(r2_pair(p, t) - r2_loop(p.tolist(), t.tolist())) <= 1e-12


def test_r2_affine_invariance():
    rng = np.random.default_rng(4)
    p, t = rng.random(300), rng.random(300)
    base = r2_pair(p, t)
    assert abs(r2_pair(2.5 * p - 1, t) - base) <= 1e-12
    assert abs(r2_pair(p, 0.1 * t + 4) - base) <= 1e-12


def test_dataset_means_equal_item_means():
    rng = np.random.default_rng(5)
    P, T = rng.random((7, 50)), rng.random((7, 50))
    rep = dataset_metrics(P, T)
    assert rep.n == 7
    assert rep.rmse == np.mean([rmse_pair(p, t) for p, t in zip(P, T)])
    assert rep.r2 == np.mean([r2_pair(p, t) for p, t in zip(P, T)])
    assert all(0 <= r <= 1 for r in rep.r2_i)
    back = EvalReport.from_dict(rep.to_dict())
    assert back.rmse == rep.rmse and back.n == 7


def test_report_outputs(tmp_path):
    rep = evaluate_pairs(np.full((2, 4), 0.2) + [[0, 0.1, 0, 0.1]], np.full((2, 4), 0.2) + [[0, 0.1, 0.05, 0.1]])
    write_reports(tmp_path / "r.json", {"All": rep})
    csv_text = (tmp_path / "r.csv").read_text().splitlines()
    assert csv_text[0] == "label,rmse_percent,r2,n,skipped"
    assert csv_text[1].startswith("All,") and reports_table({"All": rep}) == "\n".join(csv_text) + "\n"


class Perfect:
    def __init__(self, truth):
        self.truth = truth

    def transform(self, X):
        X = np.asarray(X)
        idx = [int(np.nanargmax(np.all(np.isclose(self.truth, np.nan_to_num(x, nan=-1)) | np.isnan(x), 1)))
               for x in X]
        return self.truth[idx]


def test_padding_protocol_perfect_stub_and_skips():
    truth = make_toy_corpus(ToyCorpusSpec(count=4, seed=1)).spectra
    spectra = [Spectrum.full(r) for r in truth]
    short = Spectrum(np.where(np.arange(2100) < 1500, truth[0], 0.0), np.arange(2100) < 1500)
    before = copy.deepcopy(spectra)
    reps = run_padding_protocol(spectra + [short], Perfect(truth))
    assert list(reps) == [f"{lo}-{hi} nm" for lo, hi in PADDING_BANDS]
    for label, rep in reps.items():
        assert rep.rmse == 0.0 and rep.r2 == 1.0
    assert reps["2100-2499 nm"].n == 4 and reps["2100-2499 nm"].skipped == 1
    assert reps["400-799 nm"].n == 5
    assert all(np.array_equal(a.values, b.values) for a, b in zip(spectra, before))


def test_ablation_rules():
    rng = np.random.default_rng(0)
    one = ["Clay: 20 %"]
    assert apply_ablation(one, AblationSpec.parse("- 1"), rng) == one
    assert apply_ablation(one + ["Silt: 30 %"], AblationSpec.parse("- 1"), rng) == one + ["Silt: 30 %"]
    three = ["Clay: 20 %", "Silt: 30 %", "pH: 6.5"]
    got = apply_ablation(three, AblationSpec.parse("- 1"), rng)
    assert len(got) == 2 and set(got) < set(three)
    maker = ["Spectrometer manufacturer: ASD"]
    assert apply_ablation(maker + three, AblationSpec.parse("- Manufacturer"), rng) == three
    assert apply_ablation(maker, AblationSpec.parse("- Manufacturer"), rng) is None
    assert AblationSpec.parse("All").label == "All"
    assert AblationSpec.parse("- 2") == AblationSpec("drop_random", k=2)
    with pytest.raises(ValueError):
        AblationSpec("drop_random", k=3)


def test_ablation_protocol_ordering_with_oracle_generator():
    c = make_toy_corpus(ToyCorpusSpec(count=30, seed=2, noise_std=0.0))
    names = [p.name.lower() for p in c.spec.properties]
    mid = [(p.lo + p.hi) / 2 for p in c.spec.properties]

    def oracle(sets, seeds):
        out = []
        for sents in sets:
            vals = list(mid)
            for s in sents:
                name, rest = s.split(":")
                vals[names.index(name.lower())] = float(rest.split()[0])
            out.append(toy_spectrum_from_values(vals))
        return np.stack(out)

    full = run_ablation_protocol(c.property_sets, c.spectra, oracle, AblationSpec.parse("All"), seeds=3)
    assert full.rmse < 1e-10 and full.n == 30 and full.protocol["seeds"] == 3
    single = run_ablation_protocol(c.property_sets, c.spectra, oracle, AblationSpec.parse("Clay"), seeds=3)
    assert single.rmse > full.rmse


def test_toy_corpus_reproducible_and_closed_form(tmp_path):
    spec = ToyCorpusSpec(count=20, seed=3, noise_std=0.0)
    a, b = make_toy_corpus(spec), make_toy_corpus(spec)
    assert np.array_equal(a.spectra, b.spectra) and a.property_sets == b.property_sets
    for row, vals in zip(a.spectra, a.values):
        assert np.array_equal(row, toy_spectrum_from_values(vals))
        assert np.max(np.abs(refit_toy_params(row) - [p.parameter(v) for p, v in zip(spec.properties, vals)])) < 1e-6
    write_toy_corpus(tmp_path / "a", a)
    write_toy_corpus(tmp_path / "b", b)
    for name in ("spectra.csv", "properties.json", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with pytest.raises(FileExistsError):
        write_toy_corpus(tmp_path / "a", a)
    write_toy_corpus(tmp_path / "a", a, force=True)


def test_toy_sentences_use_property_format():
    c = make_toy_corpus(ToyCorpusSpec(count=3))
    for sents in c.property_sets:
        assert len(sents) == 3
        for s in sents:
            name, rest = s.split(": ")
            float(rest.split()[0])
