"""Soil property sentences -> conditioning embeddings.

A property sentence reads ``"property: value unit"``, e.g. ``"Clay: 22.0 %"``.
Words are looked up in a learnable dictionary; numbers become a shared
numeric tag vector scaled by ``sign(v) * log10(1 + |v|)``. Sentences are
aggregated with positional transformer layers, sentence sets with
order-free transformer layers.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .nn import DTYPE, TransformerLayer, init_weights, masked_mean, sinusoidal_encoding

UNK = "<unk>"
NUM = "<num>"

_NUMBER = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")
_PREFIXED = re.compile(r"^([<>~≤≥]=?)(" + _NUMBER.pattern + r")$")


@dataclass(frozen=True)
class Token:
    kind: str  # "word" | "numeric"
    text: str
    value: float = 0.0


@dataclass(frozen=True)
class PropertySentence:
    raw: str
    tokens: tuple[Token, ...]

    def normalized(self) -> str:
        return " ".join(t.text for t in self.tokens)


def _as_number(text: str) -> float | None:
    if not _NUMBER.fullmatch(text):
        return None
    v = float(text)
    return v if math.isfinite(v) else None


def tokenize(sentence: str) -> PropertySentence:
    """Lowercase, drop colons, split on whitespace, pull out numbers.

    A whitespace token that is a decimal literal becomes a numeric token; a
    leading comparator such as ``<10`` is split into a word and a number.
    Everything else (including units like ``mg/kg``) is one word token.
    """
    if not sentence or not sentence.strip():
        raise ValueError("property sentence must be non-empty")
    tokens = []
    for piece in sentence.lower().replace(":", " ").split():
        v = _as_number(piece)
        if v is not None:
            tokens.append(Token("numeric", piece, v))
            continue
        m = _PREFIXED.match(piece)
        if m and _as_number(m.group(2)) is not None:
            tokens.append(Token("word", m.group(1)))
            tokens.append(Token("numeric", m.group(2), float(m.group(2))))
            continue
        tokens.append(Token("word", piece))
    return PropertySentence(sentence, tuple(tokens))


def numeric_scale(v):
    """sign(v) * log10(1 + |v|)."""
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.log10(1.0 + np.abs(v))
    return float(out) if out.ndim == 0 else out


def property_name(sentence: str) -> str:
    """Text before the colon, lowercased; used to select/drop properties."""
    return sentence.split(":", 1)[0].strip().lower()


class Dictionary:
    """Word -> index map. Index 0 is the unknown word, 1 the numeric tag."""

    def __init__(self, words: Iterable[str] = ()):
        self.index = {UNK: 0, NUM: 1}
        for w in words:
            if w not in self.index:
                self.index[w] = len(self.index)

    @classmethod
    def build(cls, property_sets: Iterable[Sequence[str]]) -> "Dictionary":
        words = set()
        for sentences in property_sets:
            for s in sentences:
                words.update(t.text for t in tokenize(s).tokens if t.kind == "word")
        return cls(sorted(words))

    def __len__(self):
        return len(self.index)

    def __contains__(self, word):
        return word in self.index

    def lookup(self, token: Token) -> int:
        if token.kind == "numeric":
            return self.index[NUM]
        return self.index.get(token.text, self.index[UNK])

    def to_json(self) -> str:
        return json.dumps(self.index, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Dictionary":
        index = json.loads(text)
        d = cls()
        d.index = {w: int(i) for w, i in index.items()}
        if d.index.get(UNK) != 0 or d.index.get(NUM) != 1:
            raise ValueError("dictionary lacks reserved indices")
        return d


@dataclass
class EncodedBatch:
    word_ids: torch.Tensor  # (B, S, T) long
    values: torch.Tensor  # (B, S, T) scaled numeric values, 0 for words
    is_numeric: torch.Tensor  # (B, S, T) bool
    token_mask: torch.Tensor  # (B, S, T) bool
    sentence_mask: torch.Tensor  # (B, S) bool


def encode_batch(property_sets: Sequence[Sequence], dictionary: Dictionary,
                 extra_tokens: int = 0) -> EncodedBatch:
    """Pad a batch of sentence lists into dense index tensors.

    Samples with no sentences get one all-masked slot; the encoder replaces
    it with the learned null sentence.
    """
    parsed = [[s if isinstance(s, PropertySentence) else tokenize(s) for s in sents]
              for sents in property_sets]
    b = len(parsed)
    s_max = max([len(p) for p in parsed] + [1])
    t_max = max([len(s.tokens) for p in parsed for s in p] + [1]) + extra_tokens
    word_ids = torch.zeros((b, s_max, t_max), dtype=torch.long)
    values = torch.zeros((b, s_max, t_max), dtype=DTYPE)
    is_num = torch.zeros((b, s_max, t_max), dtype=torch.bool)
    tok_mask = torch.zeros((b, s_max, t_max), dtype=torch.bool)
    sent_mask = torch.zeros((b, s_max), dtype=torch.bool)
    for i, sents in enumerate(parsed):
        for j, s in enumerate(sents):
            sent_mask[i, j] = True
            for k, tok in enumerate(s.tokens):
                word_ids[i, j, k] = dictionary.lookup(tok)
                tok_mask[i, j, k] = True
                if tok.kind == "numeric":
                    is_num[i, j, k] = True
                    values[i, j, k] = numeric_scale(tok.value)
    return EncodedBatch(word_ids, values, is_num, tok_mask, sent_mask)


@dataclass
class ConditioningSet:
    sentence_embeddings: torch.Tensor  # (B, S, d)
    pooled: torch.Tensor  # (B, d)
    sentence_mask: torch.Tensor  # (B, S)


class PropertyEncoder(nn.Module):
    def __init__(self, vocab_size: int, d_model: int = 128, heads: int = 4,
                 sentence_layers: int = 2, set_layers: int = 2):
        super().__init__()
        self.d_model = d_model
        self.words = nn.Embedding(vocab_size, d_model)
        self.numeric = nn.Linear(1, d_model)
        self.sentence_layers = nn.ModuleList(TransformerLayer(d_model, heads) for _ in range(sentence_layers))
        self.set_layers = nn.ModuleList(TransformerLayer(d_model, heads) for _ in range(set_layers))
        self.null_sentence = nn.Parameter(torch.zeros(d_model, dtype=DTYPE))
        init_weights(self)
        # unit-scale lookup vectors so names and values are not swamped by the positional code
        nn.init.trunc_normal_(self.words.weight, std=1.0, a=-2.0, b=2.0)
        nn.init.trunc_normal_(self.null_sentence, std=1.0, a=-2.0, b=2.0)
        self.to(DTYPE)

    def token_vectors(self, batch: EncodedBatch):
        vec = self.words(batch.word_ids)
        v = batch.values[..., None]
        num_vec = vec * v + self.numeric(v)
        vec = torch.where(batch.is_numeric[..., None], num_vec, vec)
        pos = sinusoidal_encoding(torch.arange(vec.shape[-2]), self.d_model)
        return (vec + pos) * batch.token_mask[..., None]

    def embed_sentences(self, batch: EncodedBatch):
        """(B, S, d) sentence vectors, zero where the sentence slot is empty."""
        b, s, t = batch.word_ids.shape
        x = self.token_vectors(batch).reshape(b * s, t, self.d_model)
        mask = batch.token_mask.reshape(b * s, t)
        for layer in self.sentence_layers:
            x = layer(x, key_mask=mask)
        pooled = masked_mean(x, mask).reshape(b, s, self.d_model)
        return pooled * batch.sentence_mask[..., None]

    def forward(self, batch: EncodedBatch) -> ConditioningSet:
        sent = self.embed_sentences(batch)
        smask = batch.sentence_mask
        empty = ~smask.any(dim=1)
        if empty.any():
            sent = sent.clone()
            sent[empty, 0] = self.null_sentence
            smask = smask.clone()
            smask[empty, 0] = True
        x = sent
        for layer in self.set_layers:
            x = layer(x, key_mask=smask)
        x = x * smask[..., None]
        return ConditioningSet(x, masked_mean(x, smask), smask)


def reference_properties() -> list[str]:
    """The bundled list of predefined property descriptions."""
    text = resources.files("soilgen").joinpath("data/reference_properties.json").read_text()
    return json.loads(text)["properties"]
