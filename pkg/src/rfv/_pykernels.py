"""Pure numpy/scipy implementations of the compiled kernels."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def rle_encode(flat: np.ndarray) -> np.ndarray:
    flat = np.asarray(flat) != 0
    n = flat.size
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [n]))
    runs = np.diff(bounds).astype(np.int64)
    if n and flat[0]:
        runs = np.concatenate(([0], runs))
    return runs


def rle_decode(runs: np.ndarray, n: int) -> np.ndarray:
    runs = np.asarray(runs, dtype=np.int64)
    values = (np.arange(runs.size) & 1).astype(np.uint8)
    return np.repeat(values, runs)[:n].copy() if runs.size else np.zeros(n, np.uint8)


def label_components(bitmap: np.ndarray) -> tuple[np.ndarray, int]:
    labels, n = ndimage.label(np.asarray(bitmap) != 0, structure=_FOUR)
    if n == 0:
        return labels.astype(np.int32), 0
    flat = labels.ravel()
    nz = flat[flat > 0]
    _, first = np.unique(nz, return_index=True)
    order = np.argsort(first, kind="stable")
    remap = np.zeros(n + 1, dtype=np.int32)
    remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
    return remap[labels], int(n)


def mips_scan(mat, norms, tie_rank, q, qnorm, k, prune, block=256):
    n = mat.shape[0]
    k = min(k, n)
    best_idx = np.empty(0, dtype=np.int64)
    best_score = np.empty(0, dtype=np.float64)
    visited = 0
    start = 0
    while start < n:
        if prune and best_idx.size == k:
            bound = qnorm * norms[start]
            bound = bound + bound * 1e-9 + 1e-300
            if bound < best_score[-1]:
                break
        stop = min(n, start + block)
        if prune and best_idx.size == k:
            # trim the block to rows whose bound can still reach the k-th score
            b = qnorm * norms[start:stop]
            b = b + b * 1e-9 + 1e-300
            live = np.flatnonzero(b >= best_score[-1])
            stop = start + (int(live[-1]) + 1 if live.size else 0)
        scores = mat[start:stop] @ q
        visited += stop - start
        idx = np.concatenate((best_idx, np.arange(start, stop, dtype=np.int64)))
        sc = np.concatenate((best_score, scores))
        order = np.lexsort((tie_rank[idx], -sc))[:k]
        best_idx, best_score = idx[order], sc[order]
        if stop < start + block and stop < n:
            break
        start = stop
    return best_idx, best_score, visited
