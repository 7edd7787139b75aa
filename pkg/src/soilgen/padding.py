"""Fill unmeasured wavebands of partial spectra.

Spectra are cut into 42 bands of 50 nm. Measured bands are embedded by a
masked transformer (positional encoding on measured bands only), read out
by 42 learnable queries through cross-attention, and decoded by a 1D conv
encoder/decoder into a 4 nm spectrum. The coarse prediction is upsampled,
the measured values are put back, and only the filled region is smoothed.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch import nn
import torch.nn.functional as F

from . import nn as snn
from .base import TorchEstimator, batches, check_spectra, to_tensor
from .spectra import BAND_WIDTH, COARSE_STEP, N_BANDS, N_COARSE, N_WL, _upsample_values, savgol_values

log = logging.getLogger(__name__)

OUTPUT_RANGE = (0.0, 1.5)


class PaddingNet(nn.Module):
    def __init__(self, d_model=64, heads=4, self_layers=2, channels=(64, 128, 128, 64), kernel=5):
        super().__init__()
        self.d_model = d_model
        self.band_proj = nn.Linear(BAND_WIDTH, d_model)
        self.self_layers = nn.ModuleList(snn.TransformerLayer(d_model, heads) for _ in range(self_layers))
        self.queries = nn.Parameter(torch.zeros(N_BANDS, d_model, dtype=snn.DTYPE))
        self.cross = snn.TransformerLayer(d_model, heads)
        self.readout = nn.Linear(d_model, BAND_WIDTH)
        pad = kernel // 2
        enc, c_in = [], 1
        for c in channels:
            enc += [nn.Conv1d(c_in, c, kernel, stride=2, padding=pad), nn.GELU()]
            c_in = c
        self.encoder = nn.Sequential(*enc)
        dec = []
        for c in list(channels[::-1][1:]) + [channels[0]]:
            dec += [nn.ConvTranspose1d(c_in, c, 4, stride=2, padding=1), nn.GELU()]
            c_in = c
        self.decoder = nn.Sequential(*dec)
        self.head = nn.Conv1d(c_in + 1, 1, kernel, padding=pad)
        snn.init_weights(self)
        nn.init.trunc_normal_(self.queries, std=0.02, a=-0.04, b=0.04)
        self.to(snn.DTYPE)

    def embed_tokens(self, bands, positions, mask):
        """bands (B, L, 50), positions (B, L), mask (B, L) -> (B, L, d).

        Rows at masked positions are exactly zero; nothing at a masked
        position influences any other row.
        """
        m = mask[..., None].to(bands.dtype)
        x = self.band_proj(bands * m)
        x = (x + snn.sinusoidal_encoding(positions, self.d_model)) * m
        for layer in self.self_layers:
            x = layer(x, key_mask=mask) * m
        return x

    def embed_bands(self, bands, band_mask):
        pos = torch.arange(N_BANDS).expand(bands.shape[0], N_BANDS)
        return self.embed_tokens(bands, pos, band_mask)

    def readout_tokens(self, emb, mask):
        q = self.queries.expand(emb.shape[0], -1, -1)
        return self.cross(q, key_mask=mask, context=emb)

    def decode(self, tokens):
        draft = self.readout(tokens).reshape(tokens.shape[0], 1, N_WL)
        draft = F.avg_pool1d(draft, COARSE_STEP)  # (B, 1, 525)
        h = self.decoder(self.encoder(draft))[..., :N_COARSE]
        return draft[:, 0] + self.head(torch.cat([h, draft], dim=1))[:, 0]

    def forward(self, bands, band_mask):
        emb = self.embed_bands(bands, band_mask)
        return self.decode(self.readout_tokens(emb, band_mask))


def to_bands(values: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(n, 2100) -> (n, 42, 50) bands and (n, 42) band mask; partial bands zeroed."""
    bands = values.reshape(-1, N_BANDS, BAND_WIDTH).copy()
    band_mask = mask.reshape(-1, N_BANDS, BAND_WIDTH).all(axis=2)
    bands[~band_mask] = 0.0
    return bands, band_mask


def truncation_masks(n: int, rng: np.random.Generator, max_prefix=20, max_suffix=20, min_kept=8) -> np.ndarray:
    """Random contiguous prefix/suffix band truncation, at least `min_kept` bands left."""
    pre = rng.integers(0, max_prefix + 1, size=n)
    suf = rng.integers(0, max_suffix + 1, size=n)
    excess = np.maximum(pre + suf - (N_BANDS - min_kept), 0)
    suf = suf - np.minimum(excess, suf)
    pre = pre - np.maximum(pre + suf - (N_BANDS - min_kept), 0)
    idx = np.arange(N_BANDS)
    return (idx[None, :] >= pre[:, None]) & (idx[None, :] < N_BANDS - suf[:, None])


class SpectraPadder(TransformerMixin, TorchEstimator):
    """Reconstructs missing wavebands; transform() returns full-range spectra.

    Input arrays use NaN for unmeasured wavelengths. fit() needs full-range
    spectra and learns from randomly truncated copies of them.
    """

    _kind = "padding"

    def __init__(self, d_model=64, heads=4, self_layers=2, channels=(64, 128, 128, 64), kernel=5,
                 epochs=30, batch_size=32, lr=1e-3, max_prefix=20, max_suffix=20, min_kept=8,
                 smooth_window_nm=100, smooth_order=2, random_state=0):
        self.d_model = d_model
        self.heads = heads
        self.self_layers = self_layers
        self.channels = channels
        self.kernel = kernel
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.max_prefix = max_prefix
        self.max_suffix = max_suffix
        self.min_kept = min_kept
        self.smooth_window_nm = smooth_window_nm
        self.smooth_order = smooth_order
        self.random_state = random_state

    def _build_model(self):
        return PaddingNet(self.d_model, self.heads, self.self_layers, tuple(self.channels), self.kernel)

    def fit(self, X, y=None, callback=None):
        values, _ = check_spectra(X, full=True)
        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.model_ = self._build_model()
        rng = np.random.default_rng(self.random_state)
        self.optimizer_ = torch.optim.Adam(self.model_.parameters(), lr=self.lr, betas=(0.9, 0.999), eps=1e-8)
        target = to_tensor(values[:, ::COARSE_STEP])
        self.loss_history_ = []
        self.model_.train()
        for epoch in range(self.epochs):
            total = 0.0
            for idx in batches(len(values), self.batch_size, rng):
                keep = truncation_masks(len(idx), rng, self.max_prefix, self.max_suffix, self.min_kept)
                bands = values[idx].reshape(-1, N_BANDS, BAND_WIDTH) * keep[..., None]
                pred = self.model_(to_tensor(bands), torch.from_numpy(keep))
                loss = F.mse_loss(pred, target[idx])
                self.optimizer_.zero_grad()
                snn.backward(loss)
                self.optimizer_.step()
                total += loss.item() * len(idx)
            self.loss_history_.append(total / len(values))
            log.info("padding epoch %d loss %.6g", epoch + 1, self.loss_history_[-1])
            if callback is not None:
                callback(epoch, self.loss_history_[-1])
        self.model_.eval()
        return self

    def predict_coarse(self, X) -> np.ndarray:
        """(n, 525) reconstruction at 4 nm, clamped to [0, 1.5]."""
        check_is_fitted(self, "model_")
        values, mask = check_spectra(X)
        bands, band_mask = to_bands(values, mask)
        if not band_mask.any(axis=1).all():
            raise ValueError("every spectrum needs at least one fully measured 50 nm band")
        with torch.no_grad():
            out = self.model_(to_tensor(bands), torch.from_numpy(band_mask)).numpy()
        return np.clip(out, *OUTPUT_RANGE)

    def transform(self, X) -> np.ndarray:
        values, mask = check_spectra(X)
        out = values.copy()
        todo = np.flatnonzero(~mask.all(axis=1))
        if todo.size == 0:
            return out
        coarse = self.predict_coarse(np.where(mask[todo], values[todo], np.nan))
        for row, c in zip(todo, coarse):
            out[row] = fill_from_coarse(values[row], mask[row], c, self.smooth_window_nm, self.smooth_order)
        return out


def fill_from_coarse(values, mask, coarse, window_nm=100, order=2) -> np.ndarray:
    """Upsample, restore measured values, smooth, and write back only gaps."""
    full = np.where(mask, values, _upsample_values(coarse))
    smoothed = savgol_values(full, window_nm, order)
    return np.where(mask, values, smoothed)
