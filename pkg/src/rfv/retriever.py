"""Bi-encoder relevance scoring and exact maximum-inner-product top-k search."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bank import Bank
from .errors import DimMismatch, EmptyIndex, EmptyText

DEFAULT_K = 3
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class EmbedderConfig:
    dim: int = 64
    kind: str = "hashed-bow"


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def embed_text(text: str, config: EmbedderConfig = EmbedderConfig()) -> np.ndarray:
    """Hashed bag-of-words embedding, L2-normalised.

    Each lowercase alphanumeric token is hashed (64-bit FNV-1a of its UTF-8
    bytes) into one of ``config.dim`` buckets.
    """
    if config.kind != "hashed-bow":
        raise ValueError(f"unknown embedder kind {config.kind!r}")
    tokens = tokenize(text)
    if not tokens:
        raise EmptyText(f"no tokens in {text!r}")
    vec = np.zeros(config.dim, dtype=np.float64)
    for tok in tokens:
        vec[fnv1a64(tok.encode("utf-8")) % config.dim] += 1.0
    return vec / np.linalg.norm(vec)


def relevance(q, m) -> float:
    """Inner-product relevance between a query and a memory embedding."""
    q = np.asarray(q, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if q.shape != m.shape or q.ndim != 1:
        raise DimMismatch(f"query shape {q.shape} vs memory shape {m.shape}")
    return float(np.dot(q, m))


@dataclass(frozen=True)
class RankedList:
    items: tuple[tuple[str, float], ...]
    visited: int = field(default=0, compare=False)

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.items]

    @property
    def scores(self) -> list[float]:
        return [s for _, s in self.items]

    def __len__(self) -> int:
        return len(self.items)

    def to_json(self) -> list[dict]:
        return [{"id": i, "score": s} for i, s in self.items]


class RetrievalIndex:
    """Immutable matrix of memory embeddings with a descending-norm cache."""

    def __init__(self, ids, matrix, views=None):
        matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise DimMismatch("matrix rows must match number of ids")
        if len(set(ids)) != len(ids):
            raise ValueError("index ids must be unique")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("embeddings must be finite")
        self.ids = list(ids)
        self.dim = int(matrix.shape[1])
        self.matrix = matrix
        self.views = list(views) if views is not None else [""] * len(ids)
        rank = np.empty(len(ids), dtype=np.int64)
        rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(len(ids))
        self.tie_rank = rank
        norms = np.sqrt(np.einsum("ij,ij->i", matrix, matrix))
        self.order = np.lexsort((rank, -norms)).astype(np.int64)
        self.sorted_matrix = np.ascontiguousarray(matrix[self.order])
        self.sorted_norms = np.ascontiguousarray(norms[self.order])
        self.sorted_rank = np.ascontiguousarray(rank[self.order])
        self._view_cache: dict[str, RetrievalIndex] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def for_view(self, view: str | None) -> "RetrievalIndex":
        """Sub-index of rows whose view matches ``view`` or carry no view label."""
        if not view:
            return self
        sub = self._view_cache.get(view)
        if sub is None:
            keep = [i for i, v in enumerate(self.views) if v in ("", view)]
            sub = RetrievalIndex([self.ids[i] for i in keep], self.matrix[keep].reshape(len(keep), self.dim),
                                 [self.views[i] for i in keep])
            self._view_cache[view] = sub
        return sub


def build_index(bank: Bank, config: EmbedderConfig = EmbedderConfig()) -> RetrievalIndex:
    """One row per entry in bank order; stored embeddings win over re-embedding."""
    rows = []
    for e in bank:
        if e.embedding is not None:
            if e.embedding.shape[0] != config.dim:
                raise DimMismatch(
                    f"entry {e.entry_id}: stored embedding dim {e.embedding.shape[0]} != {config.dim}"
                )
            rows.append(e.embedding.astype(np.float64))
        else:
            rows.append(embed_text(e.narration.text, config))
    mat = np.vstack(rows) if rows else np.zeros((0, config.dim))
    return RetrievalIndex([e.entry_id for e in bank], mat, [e.clip.view_id for e in bank])


def mips_topk(index: RetrievalIndex, q, k: int = DEFAULT_K, prune: bool = True) -> RankedList:
    """Exact top-k by inner product, ties broken by ascending entry id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise EmptyIndex("index is empty")
    q = np.ascontiguousarray(np.asarray(q, dtype=np.float64))
    if q.shape != (index.dim,):
        raise DimMismatch(f"query dim {q.shape} != index dim {index.dim}")
    if not np.all(np.isfinite(q)):
        raise ValueError("query must be finite")
    rows, scores, visited = kernels.mips_scan(
        index.sorted_matrix, index.sorted_norms, index.sorted_rank, q,
        float(np.linalg.norm(q)), int(k), bool(prune),
    )
    ids = index.ids
    order = index.order
    return RankedList(tuple((ids[order[r]], float(s)) for r, s in zip(rows, scores)), int(visited))


def brute_force_topk(index: RetrievalIndex, q, k: int) -> RankedList:
    """Unpruned reference scan used for verification."""
    return mips_topk(index, q, k, prune=False)


def retrieve_per_view(index: RetrievalIndex, instruction: str, views, k: int = DEFAULT_K,
                      config: EmbedderConfig = EmbedderConfig()) -> dict[str, RankedList]:
    q = embed_text(instruction, config)
    return {v: mips_topk(index.for_view(v), q, k) for v in views}
