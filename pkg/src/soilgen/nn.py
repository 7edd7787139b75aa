"""Neural building blocks shared by the padding, diffusion and wet-soil models.

Everything here runs on torch in float64 by default. Masked attention gives
masked keys exactly zero weight and returns zero rows for queries that have no
visible key, so padded tokens can never leak into real outputs.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"SOILGEN1"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


# ------------------------------------------------------------------ functional


def masked_attention(q, k, v, mask=None):
    """Scaled dot-product attention.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv); mask broadcastable to
    (..., Lq, Lk) with True = attend.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"incompatible q/k/v shapes {tuple(q.shape)}, {tuple(k.shape)}, {tuple(v.shape)}")
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if mask is None:
        return torch.softmax(scores, dim=-1) @ v
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape[-2:] != scores.shape[-2:] and not (mask.shape[-2] == 1 and mask.shape[-1] == scores.shape[-1]):
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match scores {tuple(scores.shape)}")
    filled = scores.masked_fill(~mask, torch.finfo(scores.dtype).min)
    weights = torch.softmax(filled, dim=-1) * mask
    visible = mask.any(dim=-1, keepdim=True)
    weights = torch.where(visible, weights, torch.zeros_like(weights))
    return weights @ v


def conv1d(x, w, bias=None, stride=1, padding=0):
    if x.shape[-2] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[-2]} channels, kernel expects {w.shape[1]}")
    if w.shape[-1] > x.shape[-1] + 2 * padding:
        raise ShapeError("kernel larger than padded input")
    return F.conv1d(x, w, bias, stride=stride, padding=padding)


def sinusoidal_encoding(positions, dim: int):
    """Standard sin/cos encoding evaluated at (possibly fractional) positions."""
    positions = torch.as_tensor(positions, dtype=DTYPE)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    angles = positions[..., None] * freqs
    enc = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        enc = F.pad(enc, (0, 1))
    return enc


def masked_mean(x, mask):
    """Mean over dim -2 of x (..., L, d) restricted to mask (..., L)."""
    m = mask.to(x.dtype)[..., None]
    return (x * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)


def backward(loss, params=None):
    """Populate .grad for every parameter; unreached parameters get zeros."""
    if loss.grad_fn is None and not loss.requires_grad:
        raise GraphConsumedError("loss was not produced by a recorded forward graph")
    try:
        loss.backward()
    except RuntimeError as exc:
        if "second time" in str(exc) or "freed" in str(exc):
            raise GraphConsumedError("graph already consumed; run the forward pass again") from exc
        raise
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = torch.zeros_like(p)


# --------------------------------------------------------------------- modules


def init_weights(module: nn.Module):
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.Conv1d, nn.ConvTranspose1d)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int, d_kv: int | None = None):
        super().__init__()
        if d_model % heads:
            raise ShapeError("d_model must be divisible by heads")
        d_kv = d_kv or d_model
        self.heads = heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_kv, d_model)
        self.v = nn.Linear(d_kv, d_model)
        self.out = nn.Linear(d_model, d_model)

    def _split(self, x):
        b, n, d = x.shape
        return x.view(b, n, self.heads, d // self.heads).transpose(1, 2)

    def forward(self, x, context=None, key_mask=None):
        """x: (B, Lq, d); context: (B, Lk, d_kv); key_mask: (B, Lk) bool."""
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        mask = None if key_mask is None else key_mask[:, None, None, :]
        h = masked_attention(q, k, v, mask)
        b, _, n, _ = h.shape
        return self.out(h.transpose(1, 2).reshape(b, n, -1))


class TransformerLayer(nn.Module):
    """Pre-norm transformer layer; cross-attends when a context is given."""

    def __init__(self, d_model: int, heads: int, d_ff: int | None = None, d_kv: int | None = None):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.norm_kv = nn.LayerNorm(d_kv) if d_kv else None
        self.attn = MultiHeadAttention(d_model, heads, d_kv)
        self.norm2 = nn.LayerNorm(d_model)
        d_ff = d_ff or 2 * d_model
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))

    def forward(self, x, key_mask=None, context=None):
        h = self.norm1(x)
        if context is None:
            ctx = h
        else:
            ctx = self.norm_kv(context) if self.norm_kv is not None else context
        x = x + self.attn(h, ctx, key_mask)
        return x + self.ff(self.norm2(x))


# ------------------------------------------------------------------ checkpoints


def _tensor_bytes(t) -> tuple[bytes, str, list[int]]:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype == np.float32:
        code = "<f4"
    elif arr.dtype == np.int64:
        code = "<i8"
    else:
        arr = arr.astype(np.float64)
        code = "<f8"
    return np.ascontiguousarray(arr).astype(code).tobytes(), code, list(arr.shape)


def save_checkpoint(path, tensors: Mapping[str, object], meta: Mapping | None = None) -> str:
    """Write a JSON manifest followed by one little-endian payload blob.

    Returns the sha256 of the written file.
    """
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        raw, code, shape = _tensor_bytes(tensors[name])
        entries.append({"name": name, "shape": shape, "dtype": code, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "parameters": entries,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    blob = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    data = path.read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a soilgen checkpoint")
    (n_head,) = struct.unpack_from("<Q", data, len(CHECKPOINT_MAGIC))
    start = len(CHECKPOINT_MAGIC) + 8
    manifest = json.loads(data[start : start + n_head])
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    base = start + n_head
    tensors = {}
    for e in manifest["parameters"]:
        arr = np.frombuffer(data, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, manifest["meta"]


def module_state(module: nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}


def optimizer_state(opt: torch.optim.Optimizer, module: nn.Module, prefix: str = "optim/") -> dict:
    """First/second moments of Adam keyed by parameter path."""
    out = {}
    names = {id(p): n for n, p in module.named_parameters()}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"{prefix}{n}/exp_avg"] = st["exp_avg"]
            out[f"{prefix}{n}/exp_avg_sq"] = st["exp_avg_sq"]
            out[f"{prefix}{n}/step"] = torch.as_tensor(st["step"], dtype=DTYPE).reshape(1)
    return out


def load_module_state(module: nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = ""):
    own = module.state_dict()
    state = {}
    for k in own:
        if prefix + k not in tensors:
            raise CheckpointError(f"checkpoint lacks parameter {prefix + k}")
        state[k] = tensors[prefix + k].to(own[k].dtype)
    module.load_state_dict(state)
