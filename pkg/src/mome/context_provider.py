"""Text hidden-state providers.

Stands in for a frozen language model: each text maps to an (M, d') matrix
of hidden states. ``HashEncoder`` seeds one pseudo-random unit-variance row
per token from the token's FNV-1a hash; ``PrecomputedProvider`` serves
matrices read from a JSONL file so real model outputs can be plugged in.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterable, Optional

import numpy as np

from . import kernels
from .errors import EmptyContextError, FormatError, NotFoundError

DEFAULT_DPRIME = 64
DEFAULT_MAX_TOKENS = 2048

_EDGE_PUNCT = re.compile(r"^[^\w]+|[^\w]+$")


@dataclass
class EmbeddingRecord:
    id: str
    matrix: np.ndarray

    @property
    def tokens(self) -> int:
        return self.matrix.shape[0]

    @property
    def dprime(self) -> int:
        return self.matrix.shape[1]


def tokenize(text: str) -> list:
    """Whitespace split, lower-cased, surrounding punctuation stripped."""
    out = []
    for raw in text.split():
        tok = _EDGE_PUNCT.sub("", raw.lower())
        if tok:
            out.append(tok)
    return out


_row_cache: Dict[tuple, np.ndarray] = {}


def token_row(token: str, dprime: int) -> np.ndarray:
    key = (token, dprime)
    row = _row_cache.get(key)
    if row is None:
        seed = kernels.fnv1a64(token.encode("utf-8"))
        row = np.random.default_rng(seed).standard_normal(dprime)
        row.setflags(write=False)
        if len(_row_cache) < 200_000:
            _row_cache[key] = row
    return row


def hash_embed_text(text: str, dprime: int = DEFAULT_DPRIME, max_tokens: int = DEFAULT_MAX_TOKENS) -> np.ndarray:
    if dprime < 1 or max_tokens < 1:
        raise ValueError("dprime and max_tokens must be >= 1")
    tokens = tokenize(text or "")
    if not tokens:
        raise EmptyContextError("text has no tokens")
    tokens = tokens[:max_tokens]
    return np.stack([token_row(t, dprime) for t in tokens])


class HashEncoder:
    def __init__(self, dprime: int = DEFAULT_DPRIME, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.dprime = dprime
        self.max_tokens = max_tokens

    def __call__(self, sample_id: Optional[str], text: str) -> np.ndarray:
        return hash_embed_text(text, self.dprime, self.max_tokens)

    def describe(self) -> dict:
        return {"kind": "hash", "dprime": self.dprime, "max_tokens": self.max_tokens}


class PrecomputedProvider:
    """Looks matrices up by sample id; the text argument is ignored."""

    def __init__(self, records: Dict[str, EmbeddingRecord]):
        self.records = records
        dims = {r.dprime for r in records.values()}
        self.dprime = dims.pop() if dims else None

    @classmethod
    def from_file(cls, path) -> "PrecomputedProvider":
        return cls(load_precomputed_embeddings(path))

    def __call__(self, sample_id: Optional[str], text: str = "") -> np.ndarray:
        try:
            return self.records[sample_id].matrix
        except KeyError:
            raise NotFoundError(f"no embedding for id {sample_id!r}") from None

    def describe(self) -> dict:
        return {"kind": "precomputed", "dprime": self.dprime, "records": len(self.records)}


def load_precomputed_embeddings(path) -> Dict[str, EmbeddingRecord]:
    records: Dict[str, EmbeddingRecord] = {}
    dprime = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rid = str(obj["id"])
                m, dp = (int(v) for v in obj["dims"])
                mat = np.asarray(obj["data"], dtype=np.float64).reshape(m, dp)
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad embedding record: {exc}") from exc
            if m < 1:
                raise FormatError(f"{path}:{lineno}: record {rid!r} has no tokens")
            if not np.all(np.isfinite(mat)):
                raise FormatError(f"{path}:{lineno}: record {rid!r} has non-finite entries")
            if dprime is None:
                dprime = dp
            elif dp != dprime:
                raise FormatError(f"{path}:{lineno}: d'={dp} differs from corpus d'={dprime}")
            records[rid] = EmbeddingRecord(rid, mat)
    return records


def write_embeddings(path, records: Iterable[EmbeddingRecord]) -> int:
    n = 0
    tmp = os.fspath(path)
    with open(tmp, "w") as fh:
        for rec in records:
            mat = np.asarray(rec.matrix, dtype=np.float64)
            # repr-precision floats round-trip exactly through json
            fh.write(json.dumps({"id": rec.id, "dims": list(mat.shape), "data": mat.ravel().tolist()}))
            fh.write("\n")
            n += 1
    return n


def make_provider(kind: str = "hash", dprime: int = DEFAULT_DPRIME, max_tokens: int = DEFAULT_MAX_TOKENS,
                  path: Optional[str] = None):
    if kind == "hash":
        return HashEncoder(dprime, max_tokens)
    if kind == "precomputed":
        if not path:
            raise FormatError("precomputed context provider needs an embeddings path")
        return PrecomputedProvider.from_file(path)
    raise FormatError(f"unknown context provider {kind!r}")
