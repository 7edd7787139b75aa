"""Text-conditioned denoising diffusion for dry soil reflectance spectra.

Spectra are standardized per wavelength, noised with a linear-beta DDPM
schedule of 300 steps, and a property-conditioned 1D U-Net learns to predict
the added noise under a min(SNR, 5) weighted loss. Generation runs ancestral
sampling from pure noise back to step 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from sklearn.utils.validation import check_is_fitted
from torch import nn
import torch.nn.functional as F

from . import nn as snn
from .base import TorchEstimator, check_property_sets, check_spectra, to_tensor
from .spectra import N_WL
from .text import ConditioningSet, Dictionary, PropertyEncoder, encode_batch, tokenize

log = logging.getLogger(__name__)

OUTPUT_RANGE = (0.0, 1.5)
SNR_CLAMP = 5.0


class DiffusionSchedule:
    """Noise scales indexed by step t = 1..T (index 0 is the clean signal).

    Betas run linearly between ``beta_start`` and ``beta_end`` after scaling
    both by 1000 / T, so a 300-step chain destroys the signal about as
    thoroughly as the classic 1000-step one.
    """

    def __init__(self, T: int = 300, beta_start: float = 1e-4, beta_end: float = 0.02):
        if T < 2:
            raise ValueError("need at least two diffusion steps")
        self.T = T
        scale = 1000.0 / T
        beta = np.linspace(beta_start * scale, beta_end * scale, T, dtype=np.float64)
        if not (0.0 < beta[0] <= beta[-1] < 1.0):
            raise ValueError(f"rescaled betas {beta[0]:g}..{beta[-1]:g} must satisfy 0 < start <= end < 1")
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        with np.errstate(divide="ignore"):
            self.snr = self.alpha_bar / (1.0 - self.alpha_bar)

    def check_step(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step must lie in 1..{self.T}")

    def loss_weight(self, t):
        self.check_step(t)
        return np.minimum(self.snr[np.asarray(t)], SNR_CLAMP)


def noising(x0, t, eps, schedule: DiffusionSchedule):
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps, batched over rows."""
    schedule.check_step(t)
    ab = schedule.alpha_bar[np.asarray(t)]
    if isinstance(x0, torch.Tensor):
        ab = torch.as_tensor(ab, dtype=x0.dtype)
        if ab.ndim:
            ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    ab = np.asarray(ab)
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (np.ndim(x0) - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def snr_weighted_loss(eps_true, eps_pred, t, schedule: DiffusionSchedule):
    """Batch mean of min(SNR(t), 5) * mean squared noise error."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError("noise tensors must have equal shapes")
    w = torch.as_tensor(schedule.loss_weight(t), dtype=eps_pred.dtype).reshape(-1)
    err = (eps_true - eps_pred) ** 2
    per_item = err.reshape(err.shape[0], -1).mean(dim=1) if err.ndim > 1 else err.mean().reshape(1)
    return (w * per_item).mean()


def invert_one_step(xt, t, eps, schedule: DiffusionSchedule):
    """Recover x0 from x_t given the exact noise used to produce it."""
    ab = schedule.alpha_bar[t]
    return (xt - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def reverse_step(xt, t, eps_pred, schedule: DiffusionSchedule, z):
    """One ancestral step x_t -> x_{t-1} with sigma_t^2 = beta_t; z ignored at t=1."""
    a, b, ab = schedule.alpha[t], schedule.beta[t], schedule.alpha_bar[t]
    mean = (xt - (b / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(a)
    if t == 1:
        return mean
    return mean + math.sqrt(b) * z


# ------------------------------------------------------------------- network


def _groups(c):
    return math.gcd(c, 8)


class ResBlock(nn.Module):
    """Conv residual block; the step/condition embedding scales and shifts
    the normalized activations, so group normalization cannot cancel it."""

    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.norm2(self.conv1(F.silu(self.norm1(x))))
        scale, shift = self.emb(emb)[..., None].chunk(2, dim=1)
        h = self.conv2(F.silu(h * (1.0 + scale) + shift))
        return self.skip(x) + h


def unshuffle(x, factor):
    """(B, L) -> (B, factor, L // factor): sample k*factor + j goes to channel j, position k."""
    return x.reshape(x.shape[0], -1, factor).transpose(1, 2)


def shuffle(h):
    """Inverse of unshuffle: (B, factor, L') -> (B, factor * L')."""
    return h.transpose(1, 2).reshape(h.shape[0], -1)


class ConditionalUNet1D(nn.Module):
    """Noise predictor over (B, 2100) spectra.

    Resolutions 2100 -> 525 -> 132 -> 33. The first stride-4 step is a
    lossless space-to-depth reshape (4 channels of 525); later ones are
    stride-4 convolutions with inputs right-padded to a multiple of 4 and
    outputs cropped back. ``channels`` are the widths at 525, 132 and 33.
    The bottleneck cross-attends to the per-sentence property embeddings;
    the pooled property vector is added to the step embedding.

    With ``alpha_bar`` given, the raw output v is mapped to a noise estimate
    sqrt(1 - alpha_bar_t) * x_t + sqrt(alpha_bar_t) * v. The zero-initialised
    network then starts at the right answer for nearly pure noise, where the
    clamped-SNR loss puts almost no weight.
    """

    def __init__(self, channels=(64, 128, 256), cond_dim=128, heads=4, factor=4, alpha_bar=None):
        super().__init__()
        if alpha_bar is None:
            self.skip_scale = self.v_scale = None
        else:
            ab = torch.as_tensor(np.asarray(alpha_bar), dtype=snn.DTYPE)
            self.register_buffer("skip_scale", torch.sqrt(1.0 - ab))
            self.register_buffer("v_scale", torch.sqrt(ab))
        self.factor = factor
        c = list(channels)
        emb_dim = 4 * c[0]
        self.c0 = c[0]
        self.time_mlp = nn.Sequential(nn.Linear(c[0], emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.cond_proj = nn.Linear(cond_dim, emb_dim)
        self.inp = nn.Conv1d(factor, c[0], 3, padding=1)
        self.down_blocks = nn.ModuleList(ResBlock(c[i], c[i], emb_dim) for i in range(len(c) - 1))
        self.downs = nn.ModuleList(nn.Conv1d(c[i], c[i + 1], factor, stride=factor) for i in range(len(c) - 1))
        self.mid1 = ResBlock(c[-1], c[-1], emb_dim)
        self.attn = snn.TransformerLayer(c[-1], heads, d_kv=cond_dim)
        self.mid2 = ResBlock(c[-1], c[-1], emb_dim)
        self.ups = nn.ModuleList(nn.ConvTranspose1d(c[i + 1], c[i], factor, stride=factor) for i in range(len(c) - 1))
        self.up_blocks = nn.ModuleList(ResBlock(2 * c[i], c[i], emb_dim) for i in range(len(c) - 1))
        self.out_norm = nn.GroupNorm(_groups(c[0]), c[0])
        self.out = nn.Conv1d(c[0] + factor, factor, 3, padding=1)
        snn.init_weights(self)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.to(snn.DTYPE)

    def forward(self, x, t, cond: ConditioningSet):
        """x (B, 2100), t (B,) int steps, cond from PropertyEncoder."""
        dtype = x.dtype
        temb = snn.sinusoidal_encoding(torch.as_tensor(t, dtype=snn.DTYPE), self.c0).to(dtype)
        emb = self.time_mlp(temb) + self.cond_proj(cond.pooled.to(dtype))
        xs = unshuffle(x, self.factor)
        h = self.inp(xs)
        skips = []
        for block, down in zip(self.down_blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            rem = (-h.shape[-1]) % self.factor
            h = down(F.pad(h, (0, rem)) if rem else h)
        h = self.mid1(h, emb)
        h = self.attn(h.transpose(1, 2), key_mask=cond.sentence_mask,
                      context=cond.sentence_embeddings.to(dtype)).transpose(1, 2)
        h = self.mid2(h, emb)
        for i in range(len(self.ups) - 1, -1, -1):
            skip = skips[i]
            h = self.ups[i](h)[..., : skip.shape[-1]]
            h = self.up_blocks[i](torch.cat([h, skip], dim=1), emb)
        h = F.silu(self.out_norm(h))
        out = shuffle(self.out(torch.cat([h, xs], dim=1)))
        if self.v_scale is None:
            return out
        t = torch.as_tensor(t, dtype=torch.long)
        return self.skip_scale[t].to(dtype)[:, None] * x + self.v_scale[t].to(dtype)[:, None] * out


PRIOR_ADAM_EPS = 1e-20


class SOGMNet(nn.Module):
    """Property encoder and noise predictor trained as one module.

    Steps whose SNR is below ``prior_snr`` carry almost no signal and get
    almost no loss weight, so there the x0 estimate is a conditional mean
    read straight from the pooled property embedding and the U-Net is not
    consulted. For those steps the noise loss reduces to a weighted
    regression of x0 on the properties. With the prior enabled the encoder
    learns only through that regression; the U-Net reads its output
    detached, since at the steps it serves the noisy input already pins the
    spectrum down and its gradients would only blur the property signal.
    """

    def __init__(self, vocab_size, d_model=128, text_heads=4, text_layers=2,
                 channels=(64, 128, 256), unet_heads=4, alpha_bar=None, prior_snr=0.0):
        super().__init__()
        self.encoder = PropertyEncoder(vocab_size, d_model, text_heads, text_layers, text_layers)
        self.unet = ConditionalUNet1D(channels, d_model, unet_heads, alpha_bar=alpha_bar)
        self.prior = None
        if prior_snr > 0:
            if alpha_bar is None:
                raise ValueError("prior_snr needs the schedule's alpha_bar")
            ab = torch.as_tensor(np.asarray(alpha_bar), dtype=snn.DTYPE)
            snr = ab / (1 - ab)
            self.register_buffer("prior_gate", snr < prior_snr)
            self.register_buffer("prior_a", ab.sqrt())
            self.register_buffer("prior_b", (1 - ab).clamp_min(1e-30).sqrt())
            self.prior = nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.SiLU(),
                                       nn.Linear(4 * d_model, N_WL)).to(snn.DTYPE)
            nn.init.zeros_(self.prior[2].weight)
            nn.init.zeros_(self.prior[2].bias)

    def _prior_eps(self, x, t, cond):
        mu = self.prior(cond.pooled.to(x.dtype))
        return (x - self.prior_a[t].to(x.dtype)[:, None] * mu) / self.prior_b[t].to(x.dtype)[:, None]

    def forward(self, x, t, batch):
        return self.denoise(x, t, self.encoder(batch))

    def denoise(self, x, t, cond: ConditioningSet):
        if self.prior is None:
            return self.unet(x, t, cond)
        t = torch.as_tensor(t, dtype=torch.long)
        gate = self.prior_gate[t]
        if bool(gate.all()):
            return self._prior_eps(x, t, cond)
        out = self.unet(x, t, ConditioningSet(cond.sentence_embeddings.detach(), cond.pooled.detach(),
                                              cond.sentence_mask))
        if not bool(gate.any()):
            return out
        return torch.where(gate[:, None], self._prior_eps(x, t, cond), out)


# ----------------------------------------------------------------- estimator


@dataclass
class GenerationRequest:
    properties: list[str]
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    ensemble: bool = True

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("a generation request needs at least one seed")


@dataclass
class GenerationResult:
    mean: np.ndarray
    std: np.ndarray
    samples: np.ndarray  # (n_seeds, 2100)
    seeds: list[int]


def drop_sentences(sentences: Sequence, p: float, rng: np.random.Generator) -> list:
    keep = rng.random(len(sentences)) >= p
    return [s for s, k in zip(sentences, keep) if k]


class SOGM(TorchEstimator):
    """Generates dry soil spectra from lists of property sentences.

    ``fit(P, Y)`` takes property sets (lists of sentences) and full-range
    spectra; ``predict(P)`` returns the mean of ``n_seeds`` generated
    spectra per property set.
    """

    _kind = "sogm"

    def __init__(self, d_model=128, text_heads=4, text_layers=2, channels=(64, 128, 256),
                 unet_heads=4, T=300, beta_start=1e-4, beta_end=0.02, lr=1e-4, batch_size=32,
                 max_steps=5000, sentence_dropout=0.3, n_seeds=10, std_floor=1e-3,
                 prior_snr=1.0, sample_dtype="float64", random_state=0):
        self.d_model = d_model
        self.text_heads = text_heads
        self.text_layers = text_layers
        self.channels = channels
        self.unet_heads = unet_heads
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.sentence_dropout = sentence_dropout
        self.n_seeds = n_seeds
        self.std_floor = std_floor
        self.prior_snr = prior_snr
        self.sample_dtype = sample_dtype
        self.random_state = random_state

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.T, self.beta_start, self.beta_end)

    def _build_model(self):
        return SOGMNet(len(self.dictionary_), self.d_model, self.text_heads, self.text_layers,
                       tuple(self.channels), self.unet_heads, self.schedule.alpha_bar, self.prior_snr)

    def _param_groups(self):
        # Encoder and prior head learn only from low-SNR steps, whose loss
        # weight puts their gradients far below Adam's usual eps; a tiny eps
        # keeps their updates scale free.
        if self.model_.prior is None:
            return self.model_.parameters()
        cond = list(self.model_.encoder.parameters()) + list(self.model_.prior.parameters())
        return [{"params": list(self.model_.unet.parameters())}, {"params": cond, "eps": PRIOR_ADAM_EPS}]

    def _extra_state(self):
        return {"norm/mean": to_tensor(self.mean_), "norm/std": to_tensor(self.std_)}

    def _extra_meta(self):
        return {"dictionary": self.dictionary_.index}

    def _restore_extra(self, tensors, meta):
        self.dictionary_ = Dictionary()
        self.dictionary_.index = {w: int(i) for w, i in meta["dictionary"].items()}
        self.mean_ = tensors["norm/mean"].numpy().copy()
        self.std_ = tensors["norm/std"].numpy().copy()

    def fit(self, P, Y, callback=None):
        P = check_property_sets(P)
        Y, _ = check_spectra(Y, full=True, name="Y")
        if len(P) != len(Y):
            raise ValueError("property sets and spectra differ in count")
        self.dictionary_ = Dictionary.build(P)
        self.mean_ = Y.mean(axis=0)
        self.std_ = np.maximum(Y.std(axis=0), self.std_floor)
        Z = to_tensor((Y - self.mean_) / self.std_)
        parsed = [[tokenize(s) for s in sents] for sents in P]

        with torch.random.fork_rng():
            torch.manual_seed(self.random_state)
            self.model_ = self._build_model()
        gen = snn.make_generator(self.random_state + 1)
        rng = np.random.default_rng(self.random_state)
        sched = self.schedule
        self.optimizer_ = torch.optim.Adam(self._param_groups(), lr=self.lr, betas=(0.9, 0.999), eps=1e-8)
        self.loss_history_ = []
        self.step_losses_ = []
        self.model_.train()
        running, count = 0.0, 0
        for step in range(self.max_steps):
            idx = rng.choice(len(Z), size=min(self.batch_size, len(Z)), replace=False)
            sents = [drop_sentences(parsed[i], self.sentence_dropout, rng) for i in idx]
            t = rng.integers(1, sched.T + 1, size=len(idx))
            eps = torch.randn((len(idx), N_WL), generator=gen, dtype=snn.DTYPE)
            xt = noising(Z[idx], t, eps, sched)
            pred = self.model_(xt, torch.from_numpy(t), encode_batch(sents, self.dictionary_))
            loss = snr_weighted_loss(eps, pred, t, sched)
            self.optimizer_.zero_grad()
            snn.backward(loss)
            self.optimizer_.step()
            running += loss.item()
            count += 1
            self.step_losses_.append(loss.item())
            if count == 50 or step == self.max_steps - 1:
                self.loss_history_.append(running / count)
                log.info("sogm step %d loss %.6g", step + 1, self.loss_history_[-1])
                if callback is not None:
                    callback(step, self.loss_history_[-1])
                running, count = 0.0, 0
        self.model_.eval()
        return self

    # -- sampling

    def _dtype(self):
        return {"float64": torch.float64, "float32": torch.float32}[self.sample_dtype]

    def _encode(self, property_sets):
        with torch.no_grad():
            return self.model_.encoder(encode_batch(property_sets, self.dictionary_))

    def sample_batch(self, property_sets: Sequence[Sequence[str]], seeds: Sequence[int],
                     eps_model=None) -> np.ndarray:
        """One reverse chain per (property set, seed) pair; returns (n, 2100).

        Each chain draws its noise from its own generator, so a row depends
        only on its property set and seed, not on batch composition.
        """
        check_is_fitted(self, "model_")
        property_sets = check_property_sets(property_sets)
        if len(property_sets) != len(seeds):
            raise ValueError("need one seed per property set")
        dtype = self._dtype()
        sched = self.schedule
        gens = [snn.make_generator(s) for s in seeds]
        cond = self._encode(property_sets)
        cond = ConditioningSet(cond.sentence_embeddings.to(dtype), cond.pooled.to(dtype), cond.sentence_mask)
        unet = eps_model
        if eps_model is None:
            unet = _cast_module(self.model_, dtype).denoise
        x = torch.stack([torch.randn(N_WL, generator=g, dtype=torch.float64) for g in gens]).to(dtype)
        with torch.no_grad():
            for t in range(sched.T, 0, -1):
                tt = torch.full((len(seeds),), t, dtype=torch.long)
                eps = unet(x, tt, cond)
                z = None
                if t > 1:
                    z = torch.stack([torch.randn(N_WL, generator=g, dtype=torch.float64) for g in gens]).to(dtype)
                x = reverse_step(x, t, eps, sched, z)
        out = x.to(torch.float64).numpy() * self.std_ + self.mean_
        return np.clip(out, *OUTPUT_RANGE)

    def sample(self, properties: Sequence[str], seed: int = 0) -> np.ndarray:
        return self.sample_batch([list(properties)], [seed])[0]

    def generate_mean(self, request: GenerationRequest, chunk: int = 512) -> GenerationResult:
        seeds = list(request.seeds)
        samples = []
        for i in range(0, len(seeds), chunk):
            part = seeds[i : i + chunk]
            samples.append(self.sample_batch([request.properties] * len(part), part))
        return summarize_samples(np.concatenate(samples), seeds)

    def generate_many(self, property_sets, seeds=None, chunk: int = 512) -> list[GenerationResult]:
        """Ensembles for many property sets, batched across sets and seeds."""
        property_sets = check_property_sets(property_sets)
        seeds = list(range(self.n_seeds)) if seeds is None else list(seeds)
        jobs = [(i, s) for i in range(len(property_sets)) for s in seeds]
        rows = []
        for k in range(0, len(jobs), chunk):
            part = jobs[k : k + chunk]
            rows.append(self.sample_batch([property_sets[i] for i, _ in part], [s for _, s in part]))
        rows = np.concatenate(rows).reshape(len(property_sets), len(seeds), N_WL)
        return [summarize_samples(r, seeds) for r in rows]

    def predict(self, P) -> np.ndarray:
        return np.stack([r.mean for r in self.generate_many(P)])


def summarize_samples(samples: np.ndarray, seeds) -> GenerationResult:
    samples = np.atleast_2d(samples)
    return GenerationResult(samples.mean(axis=0), samples.std(axis=0), samples, list(seeds))


def _cast_module(module: nn.Module, dtype):
    if dtype == snn.DTYPE:
        return module
    import copy

    return copy.deepcopy(module).to(dtype)
