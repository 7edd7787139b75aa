import numpy as np
import pytest

from soilgen.evaluation import make_toy_wet_corpus
from soilgen.spectra import Spectrum
from soilgen.wet import (
    WetSample, WetSoilModel, make_features, samples_to_arrays, smc_gravimetric, split_features, train_wet,
)

SMALL = dict(channels=(4, 8, 8, 8), max_iter=150, batch_size=16, lr=3e-3)


@pytest.mark.parametrize("m_w,m_d,expect", [(110, 100, 10.0), (100, 100, 0.0), (150, 100, 50.0)])
def test_smc_examples(m_w, m_d, expect):
    assert smc_gravimetric(m_w, m_d) == expect


@pytest.mark.parametrize("m_w,m_d", [(1, 0), (1, -2), (90, 100)])
def test_smc_invalid(m_w, m_d):
    with pytest.raises(ValueError):
        smc_gravimetric(m_w, m_d)


def test_wet_sample_validation():
    full = Spectrum.full(np.full(2100, 0.3))
    with pytest.raises(ValueError):
        WetSample(full, -1.0, full)
    with pytest.raises(ValueError):
        samples_to_arrays([])


def test_features_round_trip():
    dry = np.random.default_rng(0).uniform(0.1, 0.5, (3, 2100))
    X = make_features(dry, 12.5)
    d, s = split_features(X)
    assert np.array_equal(d, dry) and np.array_equal(s, [12.5] * 3)
    with pytest.raises(ValueError):
        split_features(X[:, :-1])
    X[0, -1] = -1
    with pytest.raises(ValueError):
        split_features(X)


@pytest.fixture(scope="module")
def data():
    dry, smc, wet = make_toy_wet_corpus(120, seed=3)
    return make_features(dry, smc), wet


@pytest.fixture(scope="module")
def model(data):
    X, y = data
    return WetSoilModel(random_state=0, **SMALL).fit(X, y)


def test_toy_corpus_law():
    dry, smc, wet = make_toy_wet_corpus(200, seed=0)
    zero = smc == 0
    assert 0.05 < zero.mean() < 0.3
    assert np.array_equal(wet[zero], dry[zero])
    assert np.all(wet[~zero].mean(1) < dry[~zero].mean(1))


def test_training_reduces_loss(model):
    assert model.loss_history_[-1] < 0.5 * model.loss_history_[0]


def test_wet_is_dry_minus_delta(model, data):
    X, _ = data
    dry, _ = split_features(X)
    delta = model.predict_delta(X)
    np.testing.assert_array_equal(model.predict(X), np.clip(dry - delta, 0.0, 1.5))


def test_deterministic(model, data):
    X, _ = data
    assert np.array_equal(model.predict(X[:5]), model.predict(X[:5]))


def test_smc_sensitivity(model, data):
    X, _ = data
    dry, _ = split_features(X[:4])
    assert not np.array_equal(model.predict_wet(dry, 5.0), model.predict_wet(dry, 30.0))


def test_iteration_cap(data):
    X, y = data
    with pytest.raises(ValueError):
        WetSoilModel(max_iter=5001).fit(X, y)


def test_fit_reproducible_and_checkpoint(model, data, tmp_path):
    X, y = data
    again = WetSoilModel(random_state=0, **SMALL).fit(X, y)
    assert again.loss_history_ == model.loss_history_
    model.save(tmp_path / "a.ckpt")
    again.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = WetSoilModel.load(tmp_path / "a.ckpt")
    assert np.array_equal(back.predict(X[:3]), model.predict(X[:3]))


def test_seeded_split_reproducible():
    dry, smc, wet = make_toy_wet_corpus(40, seed=1)
    samples = [WetSample(Spectrum.full(d), float(s), Spectrum.full(w)) for d, s, w in zip(dry, smc, wet)]
    tiny = dict(channels=(4, 4, 4, 4), max_iter=2)
    _, rep_a, split_a = train_wet(samples, random_state=7, **tiny)
    _, rep_b, split_b = train_wet(samples, random_state=7, **tiny)
    _, _, split_c = train_wet(samples, random_state=8, **tiny)
    assert all(np.array_equal(a, b) for a, b in zip(split_a, split_b))
    assert not np.array_equal(split_a[1], split_c[1])
    assert len(split_a[1]) == round(40 * 370 / 1670) or len(split_a[1]) == int(np.ceil(40 * 370 / 1670))
    assert set(split_a[0]).isdisjoint(split_a[1])
