import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfv.bank import AffordanceMask, HandTrajectory, VideoClip
from rfv.errors import DimMismatch, RTooLarge, TooFewPoints
from rfv.encoders import (
    FeaturizerConfig,
    MemoryFeature,
    Segment,
    TokenSequence,
    assemble_memory,
    bipartite_match,
    concat_memories,
    encode_mask,
    encode_trajectory,
    frame_features,
    grid_means,
    mask_occupancy,
    reduce_tokens,
    resample_arclength,
    tome_merge_step,
    trajectory_vector,
)


def test_gray_frame_cells_identical():
    f = np.full((12, 12, 3), 128, np.uint8)
    g = grid_means(f, 4)
    assert g.shape == (16, 3) and np.all(g == g[0])


def test_two_frame_clip_token_count():
    clip = VideoClip("c", np.zeros((2, 8, 8, 3), np.uint8), 10)
    assert frame_features(clip, FeaturizerConfig(4, 16)).shape == (2, 16, 16)


def test_grid_means_pixel_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        h, w = rng.integers(4, 30, 2)
        f = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
        out = grid_means(f, 4)
        # cell i spans rows floor(i*h/4) .. floor((i+1)*h/4)
        row = np.searchsorted([i * h // 4 for i in range(1, 4)], np.arange(h), side="right")
        col = np.searchsorted([i * w // 4 for i in range(1, 4)], np.arange(w), side="right")
        acc = np.zeros((16, 3))
        cnt = np.zeros(16)
        for y in range(h):
            for x in range(w):
                c = row[y] * 4 + col[x]
                acc[c] += f[y, x] / 255.0
                cnt[c] += 1
        assert np.allclose(out, acc / cnt[:, None], atol=1e-6)


def test_ingested_features_checked():
    clip = VideoClip("c", np.zeros((2, 8, 8, 3), np.uint8), 10)
    feats = np.ones((2, 5, 16), np.float32)
    assert frame_features(clip, FeaturizerConfig(4, 16), feats).dtype == np.float64
    with pytest.raises(DimMismatch):
        frame_features(clip, FeaturizerConfig(4, 8), feats)


def test_merge_identical_tokens():
    v, s, _ = tome_merge_step([[1.0, 0.0]], [1], [[1.0, 0.0]], [1], 0)
    assert len(v) == 2
    v, s, _ = tome_merge_step([[1.0, 0.0], [0.0, 1.0]], [1, 1], [[1.0, 0.0], [5.0, 5.0]], [1, 1], 1)
    assert np.allclose(v[0], [1.0, 0.0]) and s[0] == 2


def test_merge_orthogonal_r0_passthrough():
    v, s, _ = tome_merge_step([[1.0, 0.0]], [1], [[0.0, 1.0]], [1], 0)
    assert np.array_equal(v, [[0.0, 1.0], [1.0, 0.0]]) and s.tolist() == [1, 1]


def test_merge_r_too_large():
    with pytest.raises(RTooLarge):
        tome_merge_step(np.ones((2, 3)), [1, 1], np.ones((3, 3)), [1, 1, 1], 2)


def _brute_pairs(a, b, r):
    props = []
    for i, x in enumerate(a):
        sims = [float(np.dot(x, y) / (np.linalg.norm(x) * np.linalg.norm(y))) for y in b]
        j = max(range(len(b)), key=lambda t: (sims[t], -t))
        props.append((-sims[j], i, j))
    props.sort()
    return [(i, j) for _, i, j in props[:r]]


def test_match_brute_force_oracle():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = rng.normal(size=(2, 8, 6))
        ai, bi = bipartite_match(a, b, 4)
        assert list(zip(ai.tolist(), bi.tolist())) == _brute_pairs(a, b, 4)


def test_merge_weighted_mean_and_order():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(2, 6, 4))
    sa, sb = rng.integers(1, 4, 6), rng.integers(1, 4, 6)
    v, s, (ai, bi) = tome_merge_step(a, sa, b, sb, 3)
    assert v.shape[0] == 9
    for j in range(6):
        src = [i for i, jj in zip(ai, bi) if jj == j]
        num = b[j] * sb[j] + sum(a[i] * sa[i] for i in src)
        den = sb[j] + sum(sa[i] for i in src)
        assert np.allclose(v[j], num / den) and s[j] == den
    rest = [i for i in range(6) if i not in set(ai.tolist())]
    assert np.allclose(v[6:], a[rest])


def test_reduce_identity():
    rng = np.random.default_rng(1)
    frames = list(rng.normal(size=(3, 5, 4)))
    out = reduce_tokens(frames, 1.0)
    assert np.array_equal(out.vectors, np.concatenate(frames)) and out.sizes.sum() == 15


def test_reduce_ninety_percent():
    rng = np.random.default_rng(2)
    out = reduce_tokens(list(rng.normal(size=(10, 16, 8))), 0.1)
    assert len(out) == 16 and out.sizes.sum() == 160


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 20), st.floats(0.05, 1.0), st.integers(0, 10_000))
def test_reduce_count_size_and_mean(nf, per, frac, seed):
    rng = np.random.default_rng(seed)
    frames = list(rng.normal(size=(nf, per, 3)))
    out = reduce_tokens(frames, frac)
    n = nf * per
    assert len(out) == int(np.ceil(frac * n - 1e-9))
    assert out.sizes.sum() == n
    mean_out = (out.vectors * out.sizes[:, None]).sum(0) / n
    assert np.allclose(mean_out, np.concatenate(frames).mean(0), atol=1e-6)


def test_mask_occupancy_examples():
    full = AffordanceMask.from_bitmap(np.ones((32, 32)), 0)
    assert np.all(mask_occupancy(full) == 1.0)
    bm = np.zeros((32, 32))
    bm[:16, :16] = 1
    occ = mask_occupancy(AffordanceMask.from_bitmap(bm, 0))
    assert np.all(occ[:8, :8] == 1.0) and occ.sum() == 64


def test_mask_occupancy_pixel_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        h, w = 16 * rng.integers(1, 4, 2)
        bm = (rng.random((h, w)) < 0.4).astype(np.uint8)
        bm[0, 0] = 1
        occ = mask_occupancy(AffordanceMask.from_bitmap(bm, 0))
        ch, cw = h // 16, w // 16
        ref = bm.reshape(16, ch, 16, cw).mean(axis=(1, 3))
        assert np.allclose(occ, ref, atol=1e-9)


def test_mask_occupancy_fractional_cells():
    bm = np.zeros((24, 24))
    bm[0, 0] = 1
    occ = mask_occupancy(AffordanceMask.from_bitmap(bm, 0))
    # 24/16 = 1.5 pixels per cell: pixel (0,0) fills 1/2.25 of cell (0,0)
    assert np.isclose(occ[0, 0], 1 / 2.25) and np.isclose(occ.sum() * 2.25, 1.0)


def test_resample_line_and_fixed_point():
    pts = resample_arclength(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert pts.shape == (16, 2) and np.allclose(pts[:, 1], pts[:, 0] * 4 / 3)
    grid = np.column_stack((np.arange(16.0), 2 * np.arange(16.0)))
    assert np.max(np.abs(resample_arclength(grid) - grid)) < 1e-9
    with pytest.raises(TooFewPoints):
        resample_arclength(np.zeros((1, 2)))


def test_resample_uniform_gaps():
    rng = np.random.default_rng(4)
    for _ in range(20):
        t = np.linspace(0, 1, 200)
        c = rng.normal(size=(2, 4))
        xy = np.column_stack((np.polyval(c[0], t), np.polyval(c[1], t)))
        out = resample_arclength(xy)
        total = np.linalg.norm(np.diff(xy, axis=0), axis=1).sum()
        seg = np.diff(xy, axis=0)
        s0 = np.concatenate(([0], np.cumsum(np.linalg.norm(seg, axis=1))))
        along = []
        for p in out:
            # exact arc-length position: the segment the point lies on
            u = np.clip(np.einsum("ij,ij->i", p - xy[:-1], seg) / np.einsum("ij,ij->i", seg, seg), 0, 1)
            d = np.linalg.norm(xy[:-1] + u[:, None] * seg - p, axis=1)
            j = int(np.argmin(d))
            along.append(s0[j] + u[j] * np.linalg.norm(seg[j]))
        assert np.allclose(np.diff(along), total / 15, atol=1e-6)


def test_trajectory_vector_normalised():
    tr = HandTrajectory(np.array([[0, 0.0, 0.0], [1, 40.0, 20.0]]), True)
    v = trajectory_vector(tr, 40, 20)
    assert v.shape == (32,) and v.min() == 0 and v.max() == 1


def _params(n_in, d):
    rng = np.random.default_rng(0)
    return {"m.W1": rng.normal(size=(n_in, 5)), "m.b1": np.zeros(5),
            "m.W2": rng.normal(size=(5, d)), "m.b2": np.zeros(d)}


def test_encode_single_tokens():
    m = encode_mask(AffordanceMask.from_bitmap(np.ones((16, 16)), 0), _params(256, 7), "m")
    assert m.vectors.shape == (1, 7) and m.segments.tolist() == [Segment.MASK]
    tr = HandTrajectory(np.array([[0, 0.0, 0.0], [1, 4.0, 2.0], [2, 5.0, 5.0]]), True)
    t = encode_trajectory(tr, 8, 8, _params(32, 7), "m")
    assert t.vectors.shape == (1, 7) and t.segments.tolist() == [Segment.TRAJ]


def _seq(n, seg, d=4, fill=0.0):
    return TokenSequence.of(np.full((n, d), fill), seg)


def test_assemble_layout():
    mem = assemble_memory(_seq(2, Segment.TEXT), _seq(16, Segment.VIDEO), _seq(1, Segment.MASK),
                          _seq(1, Segment.TRAJ), np.ones(4))
    assert len(mem) == 21 and mem.segments[2] == Segment.STATE
    assert mem.positions.tolist() == list(range(21))
    hist = np.bincount(mem.segments, minlength=len(Segment))
    assert hist[Segment.TEXT] == 2 and hist[Segment.STATE] == 1 and hist[Segment.VIDEO] == 16
    with pytest.raises(DimMismatch):
        assemble_memory(_seq(1, Segment.TEXT, 3), _seq(1, Segment.VIDEO), _seq(1, Segment.MASK),
                        _seq(1, Segment.TRAJ), np.ones(4))
    with pytest.raises(ValueError):
        assemble_memory(_seq(1, Segment.TEXT), TokenSequence.of(np.zeros((0, 4)), Segment.VIDEO),
                        _seq(1, Segment.MASK), _seq(1, Segment.TRAJ), np.ones(4))


def _memory(eid, score, n=21):
    seq = TokenSequence.of(np.full((n, 4), score), Segment.VIDEO)
    return MemoryFeature(eid, seq, score)


def test_concat_memories():
    one = concat_memories([_memory("a", 1.0)], np.zeros(4))
    assert len(one) == 21
    three = concat_memories([_memory("c", 0.5), _memory("a", 0.9), _memory("b", 0.9)], -np.ones(4))
    assert len(three) == 65 and three.positions.tolist() == list(range(65))
    assert np.flatnonzero(three.segments == Segment.SEP).tolist() == [21, 43]
    assert np.all(three.vectors[:21] == 0.9) and np.all(three.vectors[44:] == 0.5)
