"""Tokenisation of clips, masks and trajectories, plus token merging.

Video tokens are compressed with bipartite soft matching between adjacent
frames: each token of the earlier frame proposes its most cosine-similar
token in the later frame and the strongest proposals are merged as
size-weighted means.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .bank import AffordanceMask, HandTrajectory, VideoClip
from .errors import DimMismatch, RTooLarge, TooFewPoints
from .nncore import mlp_forward

MASK_GRID = 16
TRAJ_POINTS = 16


class Segment(enum.IntEnum):
    TEXT = 0
    STATE = 1
    VIDEO = 2
    MASK = 3
    TRAJ = 4
    SEP = 5
    PROPRIO = 6
    QUERY = 7
    FUSED = 8


@dataclass(frozen=True)
class FeaturizerConfig:
    grid: int = 4
    d_model: int = 64
    seed: int = 0


@dataclass
class TokenSequence:
    vectors: np.ndarray    # (n, d)
    positions: np.ndarray  # (n,) int
    segments: np.ndarray   # (n,) Segment codes
    sizes: np.ndarray      # (n,) int merge weights

    def __post_init__(self):
        n = self.vectors.shape[0]
        if not (self.positions.shape == self.segments.shape == self.sizes.shape == (n,)):
            raise ValueError("token sequence fields must have equal lengths")
        if n > 1 and not np.all(np.diff(self.positions) > 0):
            raise ValueError("positions must strictly increase")

    def __len__(self) -> int:
        return int(self.vectors.shape[0])

    @classmethod
    def of(cls, vectors, segment: Segment, sizes=None) -> "TokenSequence":
        vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
        n = vectors.shape[0]
        sizes = np.ones(n, dtype=np.int64) if sizes is None else np.asarray(sizes, dtype=np.int64)
        return cls(vectors, np.arange(n), np.full(n, int(segment)), sizes)


@dataclass
class MemoryFeature:
    entry_id: str
    tokens: TokenSequence
    score: float


# --------------------------------------------------------------- featurizer


def grid_means(frame: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell channel means in [0, 1], shape (grid*grid, channels), row-major cells."""
    f = np.asarray(frame, dtype=np.float64) / 255.0
    h, w = f.shape[:2]
    rb = (np.arange(grid) * h) // grid
    cb = (np.arange(grid) * w) // grid
    sums = np.add.reduceat(np.add.reduceat(f, rb, axis=0), cb, axis=1)
    rh = np.diff(np.append(rb, h))
    cw = np.diff(np.append(cb, w))
    means = sums / (rh[:, None] * cw[None, :])[..., None]
    return means.reshape(grid * grid, -1)


def projection_matrix(config: FeaturizerConfig, channels: int = 3) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.normal(0.0, 1.0, size=(channels, config.d_model))


def frame_features(clip: VideoClip, config: FeaturizerConfig = FeaturizerConfig(),
                   features: np.ndarray | None = None) -> np.ndarray:
    """Per-frame tokens, shape (num_frames, tokens_per_frame, d_model).

    Ingested ``features`` are passed through unchanged (as float64).
    """
    if features is not None:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[-1] != config.d_model:
            raise DimMismatch(f"ingested features {feats.shape} do not end in d_model={config.d_model}")
        return feats
    if clip.num_frames < 1:
        raise ValueError("clip has no frames")
    proj = projection_matrix(config)
    return np.stack([grid_means(fr, config.grid) @ proj for fr in clip.frames])


# --------------------------------------------------------------------- ToMe


def bipartite_match(a: np.ndarray, b: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (a_idx, b_idx) of the ``r`` strongest A->B proposals.

    Each row of ``a`` proposes its most cosine-similar row of ``b`` (lowest
    index on ties); proposals are ranked by similarity, ties to lower A index.
    """
    an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sim = an @ bn.T
    best = sim.argmax(axis=1)
    best_sim = sim[np.arange(a.shape[0]), best]
    order = np.lexsort((np.arange(a.shape[0]), -best_sim))[:r]
    return order, best[order]


def _merge(a, sa, b, sb, r):
    a_idx, b_idx = bipartite_match(a, b, r)
    acc = b * sb[:, None]
    size = sb.astype(np.int64).copy()
    np.add.at(acc, b_idx, a[a_idx] * sa[a_idx, None])
    np.add.at(size, b_idx, sa[a_idx])
    keep = np.ones(a.shape[0], dtype=bool)
    keep[a_idx] = False
    vec = np.concatenate((acc / size[:, None], a[keep]))
    return vec, np.concatenate((size, sa[keep])), (a_idx, b_idx)


def tome_merge_step(a, sizes_a, b, sizes_b, r: int):
    """Merge ``r`` tokens of the earlier frame ``a`` into the later frame ``b``.

    Returns (vectors, sizes, (a_idx, b_idx)). Output order is ``b`` order
    (merged tokens in place) followed by the unmatched ``a`` tokens.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sa = np.asarray(sizes_a, dtype=np.int64)
    sb = np.asarray(sizes_b, dtype=np.int64)
    if not 0 <= r < min(a.shape[0], b.shape[0]):
        raise RTooLarge(f"r={r} must be < min(|A|={a.shape[0]}, |B|={b.shape[0]})")
    return _merge(a, sa, b, sb, r)


def reduce_tokens(frames, keep_fraction: float, sizes=None) -> TokenSequence:
    """Compress per-frame token groups to ceil(keep_fraction * N) tokens.

    Passes merge adjacent groups pairwise, left to right, each step with the
    largest legal ``r``. Once a single group is left it is split into
    alternating halves and merged within itself.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    groups = [np.asarray(f, dtype=np.float64) for f in frames]
    if sizes is None:
        gsizes = [np.ones(g.shape[0], dtype=np.int64) for g in groups]
    else:
        gsizes = [np.asarray(s, dtype=np.int64) for s in sizes]
    n = sum(g.shape[0] for g in groups)
    if n == 0:
        raise ValueError("no tokens to reduce")
    target = math.ceil(keep_fraction * n - 1e-9)
    count = n
    while count > target:
        if len(groups) >= 2:
            ng, ns = [], []
            i = 0
            while i < len(groups):
                if i + 1 < len(groups) and count > target:
                    a, b = groups[i], groups[i + 1]
                    r = min(min(a.shape[0], b.shape[0]) - 1, count - target)
                    if r > 0:
                        v, s, _ = tome_merge_step(a, gsizes[i], b, gsizes[i + 1], r)
                        count -= r
                    else:
                        v = np.concatenate((b, a))
                        s = np.concatenate((gsizes[i + 1], gsizes[i]))
                    ng.append(v)
                    ns.append(s)
                    i += 2
                else:
                    ng.append(groups[i])
                    ns.append(gsizes[i])
                    i += 1
            groups, gsizes = ng, ns
        else:
            g, s = groups[0], gsizes[0]
            a, b = g[0::2], g[1::2]
            r = min(a.shape[0], b.shape[0], count - target)
            v, s, _ = _merge(a, s[0::2], b, s[1::2], r)
            count -= r
            groups, gsizes = [v], [s]
    vec = np.concatenate(groups)
    return TokenSequence.of(vec, Segment.VIDEO, np.concatenate(gsizes))


# ------------------------------------------------------------- mask / traj


def _cell_coverage(n_pix: int, cells: int) -> np.ndarray:
    edges = np.arange(cells + 1) * (n_pix / cells)
    p = np.arange(n_pix, dtype=np.float64)
    lo, hi = edges[:-1, None], edges[1:, None]
    return np.clip(np.minimum(p + 1.0, hi) - np.maximum(p, lo), 0.0, 1.0)


def mask_occupancy(mask: AffordanceMask | np.ndarray, grid: int = MASK_GRID) -> np.ndarray:
    """Fraction of each grid cell covered by foreground, shape (grid, grid)."""
    bm = mask.bitmap() if isinstance(mask, AffordanceMask) else np.asarray(mask)
    bm = (bm != 0).astype(np.float64)
    h, w = bm.shape
    cy = _cell_coverage(h, grid)
    cx = _cell_coverage(w, grid)
    return (cy @ bm @ cx.T) / ((h / grid) * (w / grid))


def resample_arclength(xy, n: int = TRAJ_POINTS) -> np.ndarray:
    """``n`` points spaced uniformly in arc length along the polyline ``xy``."""
    xy = np.asarray(xy, dtype=np.float64)
    if xy.shape[0] < 2:
        raise TooFewPoints("need >= 2 trajectory points")
    seg = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    keep = np.concatenate(([True], seg > 0))
    xy = xy[keep]
    seg = seg[seg > 0]
    if seg.size == 0:
        return np.repeat(xy[:1], n, axis=0)
    s = np.concatenate(([0.0], np.cumsum(seg)))
    t = np.linspace(0.0, s[-1], n)
    return np.column_stack((np.interp(t, s, xy[:, 0]), np.interp(t, s, xy[:, 1])))


def trajectory_vector(traj: HandTrajectory, width: int, height: int, n: int = TRAJ_POINTS) -> np.ndarray:
    """Arc-length resampled, frame-normalised trajectory, flattened to 2n values."""
    pts = resample_arclength(np.asarray(traj.points)[:, 1:3], n)
    return (pts / np.array([width, height], dtype=np.float64)).ravel()


def encode_mask(mask: AffordanceMask, params, prefix: str = "mask_enc", grid: int = MASK_GRID) -> TokenSequence:
    x = mask_occupancy(mask, grid).ravel()
    y, _ = mlp_forward(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"],
                       params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    return TokenSequence.of(y, Segment.MASK)


def encode_trajectory(traj: HandTrajectory, width: int, height: int, params,
                      prefix: str = "traj_enc", n: int = TRAJ_POINTS) -> TokenSequence:
    x = trajectory_vector(traj, width, height, n)
    y, _ = mlp_forward(x, params[f"{prefix}.W1"], params[f"{prefix}.b1"],
                       params[f"{prefix}.W2"], params[f"{prefix}.b2"])
    return TokenSequence.of(y, Segment.TRAJ)


# ----------------------------------------------------------------- assembly


def assemble_memory(text: TokenSequence, video: TokenSequence, mask: TokenSequence,
                    traj: TokenSequence, state: np.ndarray) -> TokenSequence:
    """Layout ``[TEXT...][STATE][VIDEO...][MASK][TRAJ]`` with positions 0..n-1."""
    state = np.asarray(state, dtype=np.float64).reshape(1, -1)
    parts = [text.vectors, state, video.vectors, mask.vectors, traj.vectors]
    d = state.shape[1]
    for p in parts:
        if p.shape[-1] != d:
            raise DimMismatch(f"token dim {p.shape[-1]} != d_model {d}")
    if len(video) == 0:
        raise ValueError("memory needs at least one video token")
    segs = np.concatenate([text.segments, [Segment.STATE], video.segments, mask.segments, traj.segments])
    sizes = np.concatenate([text.sizes, [1], video.sizes, mask.sizes, traj.sizes])
    vec = np.concatenate(parts)
    return TokenSequence(vec, np.arange(vec.shape[0]), segs.astype(np.int64), sizes.astype(np.int64))


def canonical_order(memories):
    """Descending score, ties by ascending entry id."""
    return sorted(memories, key=lambda m: (-m.score, m.entry_id))


def concat_memories(memories, sep: np.ndarray) -> TokenSequence:
    """Join memory sequences by relevance with one SEP token between neighbours."""
    memories = canonical_order(memories)
    sep = np.asarray(sep, dtype=np.float64).reshape(1, -1)
    vecs, segs, sizes = [], [], []
    for i, m in enumerate(memories):
        if i:
            vecs.append(sep)
            segs.append(np.array([Segment.SEP]))
            sizes.append(np.array([1]))
        vecs.append(m.tokens.vectors)
        segs.append(m.tokens.segments)
        sizes.append(m.tokens.sizes)
    vec = np.concatenate(vecs)
    return TokenSequence(vec, np.arange(vec.shape[0]), np.concatenate(segs).astype(np.int64),
                         np.concatenate(sizes).astype(np.int64))
