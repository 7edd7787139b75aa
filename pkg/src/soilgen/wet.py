"""Wet soil spectra from a dry spectrum and gravimetric moisture content.

A deterministic 1D U-Net reads the dry spectrum plus a constant channel
holding SMC_g / 100 and predicts the dry-minus-wet difference.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import RegressorMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted
from torch import nn
import torch.nn.functional as F

from . import nn as snn
from .base import TorchEstimator, check_spectra, to_tensor
from .spectra import N_WL, Spectrum

log = logging.getLogger(__name__)

OUTPUT_RANGE = (0.0, 1.5)
DEFAULT_MAX_ITER = 5000


def smc_gravimetric(m_w: float, m_d: float) -> float:
    """Gravimetric soil moisture content in percent."""
    if not m_d > 0:
        raise ValueError(f"invalid dry mass {m_d!r}: must be positive")
    if m_w < m_d:
        raise ValueError(f"invalid wet mass {m_w!r}: lighter than the dry mass {m_d!r}")
    return 100.0 * (m_w - m_d) / m_d


@dataclass(frozen=True)
class WetSample:
    dry: Spectrum
    smc_g: float
    wet: Spectrum

    def __post_init__(self):
        if not self.smc_g >= 0:
            raise ValueError("smc_g must be non-negative")
        if not (self.dry.is_full and self.wet.is_full):
            raise ValueError("dry and wet spectra must be full-range")


class _Block(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        g = math.gcd(c_out, 8)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm1 = nn.GroupNorm(g, c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, c_out)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x):
        h = F.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.silu(self.skip(x) + h)


class WetUNet(nn.Module):
    """Two input channels (dry, smc/100) -> dry-minus-wet difference."""

    def __init__(self, channels=(16, 32, 64, 128), factor=4):
        super().__init__()
        c = list(channels)
        self.factor = factor
        self.inp = nn.Conv1d(2, c[0], 3, padding=1)
        self.downs = nn.ModuleList(nn.Conv1d(c[i], c[i + 1], factor, stride=factor) for i in range(len(c) - 1))
        self.down_blocks = nn.ModuleList(_Block(c[i + 1], c[i + 1]) for i in range(len(c) - 1))
        self.ups = nn.ModuleList(nn.ConvTranspose1d(c[i + 1], c[i], factor, stride=factor) for i in range(len(c) - 1))
        self.up_blocks = nn.ModuleList(_Block(2 * c[i], c[i]) for i in range(1, len(c) - 1))
        self.out = nn.Conv1d(c[0] + 2, 1, 3, padding=1)
        snn.init_weights(self)
        self.to(snn.DTYPE)

    def forward(self, dry, smc_frac):
        x = torch.stack([dry, smc_frac[:, None].expand_as(dry)], dim=1)
        h = self.inp(x)
        skips = [h]
        for down, block in zip(self.downs, self.down_blocks):
            rem = (-h.shape[-1]) % self.factor
            h = block(down(F.pad(h, (0, rem)) if rem else h))
            skips.append(h)
        for i in range(len(self.ups) - 1, 0, -1):
            h = self.ups[i](h)[..., : skips[i].shape[-1]]
            h = self.up_blocks[i - 1](torch.cat([h, skips[i]], dim=1))
        h = self.ups[0](h)[..., : dry.shape[-1]]
        return self.out(torch.cat([F.silu(h), x], dim=1))[:, 0]


def split_features(X) -> tuple[np.ndarray, np.ndarray]:
    """(n, 2101) feature rows -> dry spectra (n, 2100), smc_g (n,)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != N_WL + 1:
        raise ValueError(f"X must have shape (n, {N_WL + 1}): dry spectrum followed by SMC_g")
    dry, smc = X[:, :N_WL], X[:, N_WL]
    check_spectra(dry, full=True, name="dry spectra")
    if np.any(~(smc >= 0)):
        raise ValueError("SMC_g must be non-negative")
    return dry, smc


def make_features(dry, smc_g) -> np.ndarray:
    dry, _ = check_spectra(dry, full=True, name="dry spectra")
    smc = np.broadcast_to(np.asarray(smc_g, dtype=np.float64), (len(dry),))
    return np.column_stack([dry, smc])


class WetSoilModel(RegressorMixin, TorchEstimator):
    """``fit(X, y)`` with X = [dry spectrum | SMC_g] rows and y = wet spectra."""

    _kind = "wet"

    def __init__(self, channels=(16, 32, 64, 128), lr=1e-3, batch_size=32, max_iter=DEFAULT_MAX_ITER,
                 random_state=0):
        self.channels = channels
        self.lr = lr
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.random_state = random_state

    def _build_model(self):
        return WetUNet(tuple(self.channels))

    def _extra_state(self):
        return {"norm/delta_scale": torch.tensor([self.delta_scale_], dtype=snn.DTYPE)}

    def _restore_extra(self, tensors, meta):
        self.delta_scale_ = float(tensors["norm/delta_scale"][0])

    def fit(self, X, y, callback=None):
        dry, smc = split_features(X)
        wet, _ = check_spectra(y, full=True, name="y")
        if len(wet) != len(dry):
            raise ValueError("X and y differ in sample count")
        if self.max_iter > DEFAULT_MAX_ITER:
            raise ValueError(f"max_iter is capped at {DEFAULT_MAX_ITER} iterations")
        delta = dry - wet
        self.delta_scale_ = float(max(np.sqrt(np.mean(delta**2)), 1e-3))
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.model_ = self._build_model()
        rng = np.random.default_rng(self.random_state)
        self.optimizer_ = torch.optim.Adam(self.model_.parameters(), lr=self.lr, betas=(0.9, 0.999), eps=1e-8)
        D, S, T = to_tensor(dry), to_tensor(smc / 100.0), to_tensor(delta / self.delta_scale_)
        self.loss_history_ = []
        self.model_.train()
        running, count = 0.0, 0
        for it in range(self.max_iter):
            idx = torch.from_numpy(rng.choice(len(D), size=min(self.batch_size, len(D)), replace=False))
            loss = F.mse_loss(self.model_(D[idx], S[idx]), T[idx])
            self.optimizer_.zero_grad()
            snn.backward(loss)
            self.optimizer_.step()
            running += loss.item()
            count += 1
            if count == 50 or it == self.max_iter - 1:
                self.loss_history_.append(running / count)
                log.info("wet iter %d loss %.6g", it + 1, self.loss_history_[-1])
                if callback is not None:
                    callback(it, self.loss_history_[-1])
                running, count = 0.0, 0
        self.model_.eval()
        return self

    def predict_delta(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        dry, smc = split_features(X)
        with torch.no_grad():
            out = self.model_(to_tensor(dry), to_tensor(smc / 100.0)).numpy()
        return out * self.delta_scale_

    def predict(self, X) -> np.ndarray:
        dry, _ = split_features(X)
        return np.clip(dry - self.predict_delta(X), *OUTPUT_RANGE)

    def predict_wet(self, dry, smc_g) -> np.ndarray:
        return self.predict(make_features(dry, smc_g))

    def score(self, X, y, sample_weight=None):
        """Mean per-spectrum squared Pearson correlation."""
        from .evaluation import dataset_metrics

        return dataset_metrics(self.predict(X), np.asarray(y)).r2


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray]:
    if not samples:
        raise ValueError("wet-soil corpus is empty")
    X = np.array([np.concatenate([s.dry.values, [s.smc_g]]) for s in samples])
    y = np.array([s.wet.values for s in samples])
    return X, y


def train_wet(samples, test_size=370 / 1670, random_state=0, **params):
    """Seeded split, fit, and test-set report. Returns (model, report, (train_idx, test_idx))."""
    from .evaluation import evaluate_pairs

    X, y = samples_to_arrays(samples)
    idx = np.arange(len(X))
    train_idx, test_idx = train_test_split(idx, test_size=test_size, random_state=random_state)
    model = WetSoilModel(random_state=random_state, **params).fit(X[train_idx], y[train_idx])
    report = evaluate_pairs(model.predict(X[test_idx]), y[test_idx], protocol={"name": "wet", "split": "test"})
    return model, report, (train_idx, test_idx)
