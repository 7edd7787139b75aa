"""Estimator plumbing: input validation and checkpoint persistence."""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import nn as snn
from .spectra import N_WL, Spectrum


def check_spectra(X, *, full: bool = False, name: str = "X") -> tuple[np.ndarray, np.ndarray]:
    """Return (values, mask) arrays of shape (n, 2100).

    Accepts a sequence of Spectrum objects or a 2-D array with NaN marking
    missing wavelengths.
    """
    if isinstance(X, Spectrum):
        X = [X]
    if len(X) and isinstance(X[0], Spectrum):
        values = np.stack([s.values for s in X])
        mask = np.stack([s.mask for s in X])
    else:
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != N_WL:
            raise ValueError(f"{name} must have shape (n, {N_WL}), got {arr.shape}")
        mask = ~np.isnan(arr)
        values = np.where(mask, arr, 0.0)
        if np.any(np.isinf(values)):
            raise ValueError(f"{name} contains infinite values")
    if values.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if full and not mask.all():
        raise ValueError(f"{name} must contain full-range spectra (400-2499 nm, no gaps)")
    return values, mask


def check_property_sets(P) -> list[list[str]]:
    if isinstance(P, str):
        raise TypeError("property sets must be a list of sentence lists, not a string")
    out = []
    for sents in P:
        if isinstance(sents, str):
            raise TypeError("each property set must be a list of sentences")
        out.append([str(s) for s in sents])
    return out


class CheckpointMixin:
    """save()/load() for estimators holding a torch module in `model_`."""

    _kind = "estimator"

    def _extra_state(self) -> dict:
        return {}

    def _restore_extra(self, tensors: dict, meta: dict):
        pass

    def _build_model(self):
        raise NotImplementedError

    def save(self, path, include_optimizer: bool = False) -> str:
        check_is_fitted(self, "model_")
        tensors = snn.module_state(self.model_, "model/")
        tensors.update(self._extra_state())
        if include_optimizer and getattr(self, "optimizer_", None) is not None:
            tensors.update(snn.optimizer_state(self.optimizer_, self.model_))
        meta = {
            "kind": self._kind,
            "params": _jsonable(self.get_params()),
            "loss_history": [float(x) for x in getattr(self, "loss_history_", [])],
        }
        meta.update(self._extra_meta())
        return snn.save_checkpoint(path, tensors, meta)

    def _extra_meta(self) -> dict:
        return {}

    @classmethod
    def load(cls, path):
        tensors, meta = snn.load_checkpoint(path)
        if meta.get("kind") != cls._kind:
            raise snn.CheckpointError(f"{path} holds a {meta.get('kind')!r} checkpoint, not {cls._kind!r}")
        est = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["params"].items()})
        est._restore_extra(tensors, meta)
        est.model_ = est._build_model()
        snn.load_module_state(est.model_, tensors, "model/")
        est.model_.eval()
        est.loss_history_ = list(meta.get("loss_history", []))
        return est


def _jsonable(params: dict) -> dict:
    out = {}
    for k, v in params.items():
        if isinstance(v, tuple):
            v = list(v)
        if isinstance(v, np.generic):
            v = v.item()
        json.dumps(v)
        out[k] = v
    return out


class TorchEstimator(CheckpointMixin, BaseEstimator):
    pass


def to_tensor(a) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=snn.DTYPE)


def batches(n: int, batch_size: int, rng: np.random.Generator) -> Sequence[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
