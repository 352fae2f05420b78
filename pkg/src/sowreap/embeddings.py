"""Pluggable word-vector providers used for alignment."""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        """Return an ``(len(tokens), dim)`` array; row i may depend on the context."""
        ...


class HashEmbeddings:
    """Deterministic synthetic vectors keyed on the lowercased word.

    Distinct words get (almost surely) distinct directions; identical words
    get identical vectors, so cosine similarity of a word with itself is 1.
    """

    def __init__(self, dim: int = 64, salt: str = ""):
        self.dim = dim
        self.salt = salt
        self._cache: dict[str, np.ndarray] = {}

    def vector(self, word: str) -> np.ndarray:
        key = word.lower()
        v = self._cache.get(key)
        if v is None:
            seed = int.from_bytes(hashlib.sha256((self.salt + key).encode()).digest()[:8], "little")
            v = np.random.default_rng(seed).standard_normal(self.dim)
            v /= np.linalg.norm(v)
            self._cache[key] = v
        return v

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.vector(t) for t in tokens])


class TableEmbeddings:
    """Explicit word -> vector table; unknown words fall back to hash vectors."""

    def __init__(self, table: dict[str, np.ndarray], fallback: HashEmbeddings | None = None):
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent vector dimensions: {sorted(dims)}")
        self.dim = dims.pop() if dims else (fallback.dim if fallback else 64)
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}
        self.fallback = fallback or HashEmbeddings(self.dim)

    def embed(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        rows = []
        for t in tokens:
            v = self.table.get(t)
            if v is None:
                v = self.table.get(t.lower())
            rows.append(self.fallback.vector(t) if v is None else v)
        return np.stack(rows)

    @classmethod
    def from_glove(cls, path: str | Path, limit: int | None = None) -> TableEmbeddings:
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh):
                if limit is not None and lineno >= limit:
                    break
                parts = line.rstrip().split(" ")
                if len(parts) < 2:
                    continue
                table[parts[0]] = np.array([float(x) for x in parts[1:]])
        return cls(table)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return (a / na) @ (b / nb).T


def load_provider(path: str | Path | None, dim: int = 64) -> EmbeddingProvider:
    if path:
        return TableEmbeddings.from_glove(path)
    return HashEmbeddings(dim)
