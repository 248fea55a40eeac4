"""Policy generator: robot observation + retrieved memories -> action chunk.

The network is a fixed graph with hand-written backward pass::

    robot tokens  = [obs grid tokens][PROPRIO][TEXT]      (+pos, +segment)
    memory tokens = per entry [TEXT][STATE][VIDEO..][MASK][TRAJ], SEP between
    fusion        = cross-attention between memory and robot tokens
    trunk         = pre-LN self-attention blocks over [robot][fused][queries]
    head          = linear readout of the H query tokens -> H x dof actions

Two fusion modes exist. ``paper``: queries and keys are projections of the
memory tokens and values are projections of robot tokens (resampled onto the
memory positions); the fused memory stream is appended to the robot tokens.
``standard``: queries from robot tokens, keys/values from memory; the fused
stream replaces the robot tokens.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .bank import Bank, BankEntry
from .encoders import (
    MASK_GRID,
    TRAJ_POINTS,
    FeaturizerConfig,
    Segment,
    frame_features,
    grid_means,
    mask_occupancy,
    projection_matrix,
    reduce_tokens,
    trajectory_vector,
)
from .errors import DimMismatch, EmptyDataset, ShapeMismatch
from .retriever import EmbedderConfig, RankedList, RetrievalIndex, embed_text, mips_topk

FUSION_MODES = ("paper", "standard")


@dataclass(frozen=True)
class PolicyConfig:
    d_model: int = 64
    d_hidden: int = 128
    heads: int = 4
    layers: int = 2
    horizon: int = 8
    dof: int = 4
    k_retrieved: int = 3
    keep_fraction: float = 0.1
    lr: float = 1e-3
    seed: int = 0
    fusion_mode: str = "paper"
    views: tuple[str, ...] = ("top",)
    grid: int = 4
    embed_dim: int = 64
    featurizer_seed: int = 0
    use_retrieval: bool = True
    zero_traj: bool = False
    zero_mask: bool = False
    max_robot_len: int = 128
    max_memory_len: int = 512
    batch_size: int = 16
    steps: int = 200
    ensemble: bool = True
    ensemble_m: float = 0.1
    text_dropout: float = 0.0   # train-time chance of zeroing the robot instruction token

    def __post_init__(self):
        if self.k_retrieved < 1:
            raise ValueError("k_retrieved must be >= 1")
        if not 0 < self.keep_fraction <= 1:
            raise ValueError("keep_fraction must be in (0, 1]")
        if not 0 <= self.text_dropout < 1:
            raise ValueError("text_dropout must be in [0, 1)")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.d_model % self.heads:
            raise ValueError("heads must divide d_model")
        object.__setattr__(self, "views", tuple(self.views))

    @property
    def featurizer(self) -> FeaturizerConfig:
        return FeaturizerConfig(self.grid, self.d_model, self.featurizer_seed)

    @property
    def embedder(self) -> EmbedderConfig:
        return EmbedderConfig(self.embed_dim)

    def to_json(self) -> dict:
        d = asdict(self)
        d["views"] = list(self.views)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        if "views" in d:
            d["views"] = tuple(d["views"])
        return cls(**d)


# ------------------------------------------------------------------ params


def init_params(cfg: PolicyConfig) -> nn.ParameterStore:
    d, dh, s = cfg.d_model, cfg.d_hidden, cfg.seed
    store = nn.ParameterStore()

    def add(name, shape, scheme="uniform"):
        store.add(name, nn.seeded_init(shape, scheme, nn.param_seed(s, name)))

    def add_linear(prefix, n_in, n_out):
        add(f"{prefix}.W", (n_in, n_out))
        add(f"{prefix}.b", (n_out,), "zeros")

    def add_mlp(prefix, n_in, n_hid, n_out):
        add(f"{prefix}.W1", (n_in, n_hid))
        add(f"{prefix}.b1", (n_hid,), "zeros")
        add(f"{prefix}.W2", (n_hid, n_out))
        add(f"{prefix}.b2", (n_out,), "zeros")

    def add_ln(prefix):
        add(f"{prefix}.g", (d,), "ones")
        add(f"{prefix}.b", (d,), "zeros")

    def add_attn(prefix):
        for w in ("q", "k", "v", "o"):
            add(f"{prefix}.W{w}", (d, d))
            add(f"{prefix}.b{w}", (d,), "zeros")

    add_linear("obs_proj", d, d)
    add_mlp("proprio", cfg.dof, dh, d)
    add_linear("text_proj", cfg.embed_dim, d)
    add("robot_pos", (cfg.max_robot_len, d), "normal")
    add("seg_emb", (len(Segment), d), "normal")
    if cfg.use_retrieval:
        add("mem_pos", (cfg.max_memory_len, d), "normal")
        add("state", (d,), "normal")
        add("sep", (d,), "normal")
        add_mlp("mask_enc", MASK_GRID * MASK_GRID, dh, d)
        add_mlp("traj_enc", 2 * TRAJ_POINTS, dh, d)
        add_ln("fuse.ln_m")
        add_ln("fuse.ln_r")
        add_attn("fuse.attn")
    for i in range(cfg.layers):
        add_ln(f"layer{i}.ln1")
        add_attn(f"layer{i}.attn")
        add_ln(f"layer{i}.ln2")
        add_mlp(f"layer{i}.mlp", d, dh, d)
    add("queries", (cfg.horizon, d), "normal")
    add_ln("ln_f")
    add("head.W", (d, cfg.dof), "zeros")  # zero head: training starts from a zero chunk
    add("head.b", (cfg.dof,), "zeros")
    return store


# ------------------------------------------------------------------ inputs


@dataclass(frozen=True)
class MemoryInputs:
    """Non-learned inputs for one retrieved entry."""

    entry_id: str
    score: float
    text: np.ndarray    # (embed_dim,)
    video: np.ndarray   # (n_video, d_model)
    occupancy: np.ndarray  # (MASK_GRID**2,)
    traj: np.ndarray    # (2 * TRAJ_POINTS,)


class MemoryEncoder:
    """Caches the fixed (non-learned) per-entry memory inputs."""

    def __init__(self, bank: Bank, cfg: PolicyConfig):
        self.bank = bank
        self.cfg = cfg
        self._cache: dict[str, tuple] = {}

    def fixed_inputs(self, entry: BankEntry) -> tuple:
        hit = self._cache.get(entry.entry_id)
        if hit is None:
            cfg = self.cfg
            if entry.embedding is not None and entry.embedding.shape[0] == cfg.embed_dim:
                text = entry.embedding.astype(np.float64)
            else:
                text = embed_text(entry.narration.text, cfg.embedder)
            feats = frame_features(entry.clip, cfg.featurizer, entry.frame_features)
            video = reduce_tokens(list(feats), cfg.keep_fraction).vectors
            occ = mask_occupancy(entry.mask).ravel()
            traj = trajectory_vector(entry.trajectory, entry.clip.width, entry.clip.height)
            hit = (text, video, occ, traj)
            self._cache[entry.entry_id] = hit
        return hit

    def inputs(self, ranked: RankedList) -> list[MemoryInputs]:
        out = []
        for eid, score in sorted(ranked.items, key=lambda it: (-it[1], it[0])):
            text, video, occ, traj = self.fixed_inputs(self.bank.get_entry(eid))
            out.append(MemoryInputs(eid, score, text, video, occ, traj))
        return out


@dataclass
class PolicyBatch:
    grid: np.ndarray      # (B, n_grid, d) featurised observation tokens
    proprio: np.ndarray   # (B, dof)
    text: np.ndarray      # (B, embed_dim)
    mem_text: np.ndarray | None = None   # (B, K, embed_dim)
    mem_video: np.ndarray | None = None  # (B, sum n_video, d)
    mem_nv: tuple[int, ...] = ()
    mem_occ: np.ndarray | None = None    # (B, K, 256)
    mem_traj: np.ndarray | None = None   # (B, K, 32)

    @property
    def size(self) -> int:
        return int(self.grid.shape[0])

    @property
    def signature(self) -> tuple:
        return (self.grid.shape[1:], self.mem_nv)


def observation_tokens(frames: Sequence[np.ndarray], cfg: PolicyConfig,
                       proj: np.ndarray | None = None) -> np.ndarray:
    """Featurised grid tokens for each view frame, concatenated: (views*grid^2, d)."""
    if proj is None:
        proj = projection_matrix(cfg.featurizer)
    return np.concatenate([grid_means(f, cfg.grid) @ proj for f in frames])


def make_sample(grid_tokens, proprio, text_emb, memories: Sequence[MemoryInputs] | None) -> dict:
    return {"grid": np.asarray(grid_tokens, dtype=np.float64),
            "proprio": np.asarray(proprio, dtype=np.float64),
            "text": np.asarray(text_emb, dtype=np.float64),
            "memories": list(memories) if memories else []}


def stack_samples(samples: Sequence[dict], cfg: PolicyConfig) -> PolicyBatch:
    b = PolicyBatch(np.stack([s["grid"] for s in samples]),
                    np.stack([s["proprio"] for s in samples]),
                    np.stack([s["text"] for s in samples]))
    if cfg.use_retrieval:
        mems = [s["memories"] for s in samples]
        nv = tuple(m.video.shape[0] for m in mems[0])
        if not nv:
            raise ValueError("retrieval policy needs at least one memory per sample")
        for ms in mems[1:]:
            if tuple(m.video.shape[0] for m in ms) != nv:
                raise ShapeMismatch("memory layouts differ inside a batch")
        b.mem_nv = nv
        b.mem_text = np.stack([np.stack([m.text for m in ms]) for ms in mems])
        b.mem_video = np.stack([np.concatenate([m.video for m in ms]) for ms in mems])
        b.mem_occ = np.stack([np.stack([m.occupancy for m in ms]) for ms in mems])
        b.mem_traj = np.stack([np.stack([m.traj for m in ms]) for ms in mems])
    return b


def memory_layout(nv: Sequence[int]) -> dict:
    """Positions of each segment inside the concatenated memory sequence."""
    text, state, video, mask, traj, sep = [], [], [], [], [], []
    pos = 0
    for i, n in enumerate(nv):
        if i:
            sep.append(pos)
            pos += 1
        text.append(pos)
        state.append(pos + 1)
        video.extend(range(pos + 2, pos + 2 + n))
        mask.append(pos + 2 + n)
        traj.append(pos + 3 + n)
        pos += 4 + n
    segs = np.empty(pos, dtype=np.int64)
    for idx, seg in ((text, Segment.TEXT), (state, Segment.STATE), (video, Segment.VIDEO),
                     (mask, Segment.MASK), (traj, Segment.TRAJ), (sep, Segment.SEP)):
        segs[idx] = int(seg)
    return {k: np.asarray(v, dtype=np.int64) for k, v in
            (("text", text), ("state", state), ("video", video), ("mask", mask),
             ("traj", traj), ("sep", sep))} | {"segments": segs, "length": pos}


# ----------------------------------------------------------------- forward


def _p(store, prefix, keys):
    return {k: store[f"{prefix}.{k}"] for k in keys}


def _ln(x, store, prefix):
    return nn.layernorm_forward(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def _mlp(x, store, prefix):
    return nn.mlp_forward(x, store[f"{prefix}.W1"], store[f"{prefix}.b1"],
                          store[f"{prefix}.W2"], store[f"{prefix}.b2"])


def forward(store: nn.ParameterStore, batch: PolicyBatch, cfg: PolicyConfig):
    """Returns (actions (B, H, dof), cache)."""
    B = batch.size
    d = cfg.d_model
    if batch.grid.shape[-1] != d:
        raise DimMismatch(f"observation tokens have dim {batch.grid.shape[-1]}, d_model={d}")
    c: dict = {"B": B}

    # robot tokens
    g_tok, c["obs"] = nn.linear_forward(batch.grid, store["obs_proj.W"], store["obs_proj.b"])
    p_tok, c["prop"] = _mlp(batch.proprio, store, "proprio")
    t_tok, c["text"] = nn.linear_forward(batch.text, store["text_proj.W"], store["text_proj.b"])
    R = np.concatenate([g_tok, p_tok[:, None], t_tok[:, None]], axis=1)
    Lr = R.shape[1]
    if Lr > cfg.max_robot_len:
        raise ShapeMismatch(f"robot sequence length {Lr} exceeds max_robot_len")
    r_segs = np.array([Segment.VIDEO] * g_tok.shape[1] + [Segment.PROPRIO, Segment.TEXT])
    R = R + store["robot_pos"][:Lr] + store["seg_emb"][r_segs]
    c["n_grid"], c["Lr"], c["r_segs"] = g_tok.shape[1], Lr, r_segs

    # memory tokens
    if cfg.use_retrieval:
        lay = memory_layout(batch.mem_nv)
        Lm = lay["length"]
        if Lm > cfg.max_memory_len:
            raise ShapeMismatch(f"memory sequence length {Lm} exceeds max_memory_len")
        mt, c["mtext"] = nn.linear_forward(batch.mem_text, store["text_proj.W"], store["text_proj.b"])
        mv, c["mvid"] = nn.linear_forward(batch.mem_video, store["obs_proj.W"], store["obs_proj.b"])
        mm, c["mmask"] = _mlp(batch.mem_occ, store, "mask_enc")
        mj, c["mtraj"] = _mlp(batch.mem_traj, store, "traj_enc")
        if cfg.zero_mask:
            mm = np.zeros_like(mm)
        if cfg.zero_traj:
            mj = np.zeros_like(mj)
        M = np.zeros((B, Lm, d))
        M[:, lay["text"]] = mt
        M[:, lay["state"]] = store["state"]
        M[:, lay["video"]] = mv
        M[:, lay["mask"]] = mm
        M[:, lay["traj"]] = mj
        if lay["sep"].size:
            M[:, lay["sep"]] = store["sep"]
        M = M + store["mem_pos"][:Lm] + store["seg_emb"][lay["segments"]]
        c["lay"], c["Lm"] = lay, Lm

        if cfg.fusion_mode == "paper":
            ridx = (np.arange(Lm) * Lr) // Lm
            Rv = R[:, ridx]
            mn, c["ln_m"] = _ln(M, store, "fuse.ln_m")
            rn, c["ln_r"] = _ln(Rv, store, "fuse.ln_r")
            att, c["fatt"] = nn.mha_forward(mn, mn, rn, _p(store, "fuse.attn", nn.MHA_KEYS), cfg.heads)
            fused = M + att
            X = np.concatenate([R, fused], axis=1)
            c["ridx"] = ridx
        else:
            rn, c["ln_r"] = _ln(R, store, "fuse.ln_r")
            mn, c["ln_m"] = _ln(M, store, "fuse.ln_m")
            att, c["fatt"] = nn.mha_forward(rn, mn, mn, _p(store, "fuse.attn", nn.MHA_KEYS), cfg.heads)
            X = R + att
        c["fused_attn"] = att
    else:
        X = R
    L0 = X.shape[1]
    X = np.concatenate([X, np.broadcast_to(store["queries"], (B, cfg.horizon, d))], axis=1)
    c["L0"] = L0

    # trunk
    c["layers"] = []
    for i in range(cfg.layers):
        lc = {}
        h, lc["ln1"] = _ln(X, store, f"layer{i}.ln1")
        a, lc["attn"] = nn.mha_forward(h, h, h, _p(store, f"layer{i}.attn", nn.MHA_KEYS), cfg.heads)
        X = X + a
        h, lc["ln2"] = _ln(X, store, f"layer{i}.ln2")
        m, lc["mlp"] = _mlp(h, store, f"layer{i}.mlp")
        X = X + m
        c["layers"].append(lc)
    Xf, c["ln_f"] = _ln(X[:, L0:], store, "ln_f")
    out, c["head"] = nn.linear_forward(Xf, store["head.W"], store["head.b"])
    return out, c


def backward(dout: np.ndarray, cache: dict, store: nn.ParameterStore, cfg: PolicyConfig) -> dict:
    """Gradients of every parameter given d(loss)/d(actions)."""
    c = cache
    B, d, L0 = c["B"], cfg.d_model, c["L0"]
    g: dict[str, np.ndarray] = {}

    def acc(name, val):
        if name in g:
            g[name] = g[name] + val
        else:
            g[name] = val

    def acc_ln(prefix, dg, db):
        acc(f"{prefix}.g", dg)
        acc(f"{prefix}.b", db)

    def acc_mlp(prefix, dW1, db1, dW2, db2):
        for k, v in zip(("W1", "b1", "W2", "b2"), (dW1, db1, dW2, db2)):
            acc(f"{prefix}.{k}", v)

    def acc_attn(prefix, grads):
        for k, v in grads.items():
            acc(f"{prefix}.{k}", v)

    dXf, dW, db = nn.linear_backward(dout, c["head"])
    acc("head.W", dW)
    acc("head.b", db)
    dq, dg_, db_ = nn.layernorm_backward(dXf, c["ln_f"])
    acc_ln("ln_f", dg_, db_)
    dX = np.zeros((B, L0 + cfg.horizon, d))
    dX[:, L0:] = dq

    for i in reversed(range(cfg.layers)):
        lc = c["layers"][i]
        dh, dW1, db1, dW2, db2 = nn.mlp_backward(dX, lc["mlp"])
        acc_mlp(f"layer{i}.mlp", dW1, db1, dW2, db2)
        dx2, dg_, db_ = nn.layernorm_backward(dh, lc["ln2"])
        acc_ln(f"layer{i}.ln2", dg_, db_)
        dX = dX + dx2
        dq_, dk_, dv_, ga = nn.mha_backward(dX, lc["attn"])
        acc_attn(f"layer{i}.attn", ga)
        dx1, dg_, db_ = nn.layernorm_backward(dq_ + dk_ + dv_, lc["ln1"])
        acc_ln(f"layer{i}.ln1", dg_, db_)
        dX = dX + dx1

    acc("queries", dX[:, L0:].sum(axis=0))
    dX0 = dX[:, :L0]
    Lr = c["Lr"]

    if cfg.use_retrieval:
        Lm = c["Lm"]
        if cfg.fusion_mode == "paper":
            dR = dX0[:, :Lr].copy()
            dfused = dX0[:, Lr:]
            dM = dfused.copy()
            dmn_q, dmn_k, drn, ga = nn.mha_backward(dfused, c["fatt"])
            acc_attn("fuse.attn", ga)
            dM_ln, dg_, db_ = nn.layernorm_backward(dmn_q + dmn_k, c["ln_m"])
            acc_ln("fuse.ln_m", dg_, db_)
            dM += dM_ln
            dRv, dg_, db_ = nn.layernorm_backward(drn, c["ln_r"])
            acc_ln("fuse.ln_r", dg_, db_)
            np.add.at(dR, (slice(None), c["ridx"]), dRv)
        else:
            dR = dX0.copy()
            drn, dmn_k, dmn_v, ga = nn.mha_backward(dX0, c["fatt"])
            acc_attn("fuse.attn", ga)
            dR_ln, dg_, db_ = nn.layernorm_backward(drn, c["ln_r"])
            acc_ln("fuse.ln_r", dg_, db_)
            dR += dR_ln
            dM, dg_, db_ = nn.layernorm_backward(dmn_k + dmn_v, c["ln_m"])
            acc_ln("fuse.ln_m", dg_, db_)

        lay = c["lay"]
        acc("mem_pos", np.pad(dM.sum(axis=0), ((0, cfg.max_memory_len - Lm), (0, 0))))
        dseg = np.zeros((len(Segment), d))
        np.add.at(dseg, lay["segments"], dM.sum(axis=0))
        acc("seg_emb", dseg)
        acc("state", dM[:, lay["state"]].sum(axis=(0, 1)))
        acc("sep", dM[:, lay["sep"]].sum(axis=(0, 1)) if lay["sep"].size else np.zeros(d))
        din = {}  # gradients w.r.t. the fixed memory inputs, kept for inspection
        din["mem_text"], dW, db = nn.linear_backward(dM[:, lay["text"]], c["mtext"])
        acc("text_proj.W", dW)
        acc("text_proj.b", db)
        din["mem_video"], dW, db = nn.linear_backward(dM[:, lay["video"]], c["mvid"])
        acc("obs_proj.W", dW)
        acc("obs_proj.b", db)
        dmm = np.zeros_like(dM[:, lay["mask"]]) if cfg.zero_mask else dM[:, lay["mask"]]
        dmj = np.zeros_like(dM[:, lay["traj"]]) if cfg.zero_traj else dM[:, lay["traj"]]
        din["mem_occ"], *gm = nn.mlp_backward(dmm, c["mmask"])
        acc_mlp("mask_enc", *gm)
        din["mem_traj"], *gj = nn.mlp_backward(dmj, c["mtraj"])
        acc_mlp("traj_enc", *gj)
        c["input_grads"] = din
    else:
        dR = dX0

    acc("robot_pos", np.pad(dR.sum(axis=0), ((0, cfg.max_robot_len - Lr), (0, 0))))
    dseg = np.zeros((len(Segment), d))
    np.add.at(dseg, c["r_segs"], dR.sum(axis=0))
    acc("seg_emb", dseg)
    ng = c["n_grid"]
    _, dW, db = nn.linear_backward(dR[:, :ng], c["obs"])
    acc("obs_proj.W", dW)
    acc("obs_proj.b", db)
    _, *gp = nn.mlp_backward(dR[:, ng], c["prop"])
    acc_mlp("proprio", *gp)
    _, dW, db = nn.linear_backward(dR[:, ng + 1], c["text"])
    acc("text_proj.W", dW)
    acc("text_proj.b", db)
    return g


# -------------------------------------------------------------------- loss


def bc_loss(pred, expert) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    if pred.shape != expert.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs expert {expert.shape}")
    return float(np.mean(np.abs(pred - expert)))


def bc_loss_grad(pred, expert) -> np.ndarray:
    diff = np.asarray(pred) - np.asarray(expert)
    return np.sign(diff) / diff.size


# ------------------------------------------------------------------- policy


class Policy:
    """Parameters + config + the retrieval plumbing needed to act."""

    def __init__(self, cfg: PolicyConfig, store: nn.ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else init_params(cfg)
        self._proj = projection_matrix(cfg.featurizer)

    def forward(self, batch: PolicyBatch):
        return forward(self.store, batch, self.cfg)

    def backward(self, dout, cache):
        return backward(dout, cache, self.store, self.cfg)

    def predict(self, batch: PolicyBatch) -> np.ndarray:
        return forward(self.store, batch, self.cfg)[0]

    def observation_tokens(self, frames) -> np.ndarray:
        return observation_tokens(frames, self.cfg, self._proj)

    def save(self, path: str | os.PathLike) -> Path:
        root = Path(path)
        nn.save_params(self.store, root)
        (root / "config.json").write_text(json.dumps(self.cfg.to_json(), indent=1) + "\n",
                                          encoding="utf-8")
        return root

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Policy":
        root = Path(path)
        cfg = PolicyConfig.from_json(json.loads((root / "config.json").read_text(encoding="utf-8")))
        return cls(cfg, nn.load_params(root))


class RetrievalContext:
    """Index + bank + cached memory inputs; queries are memoised per instruction."""

    def __init__(self, bank: Bank, index: RetrievalIndex, cfg: PolicyConfig):
        self.bank = bank
        self.index = index
        self.cfg = cfg
        self.encoder = MemoryEncoder(bank, cfg)
        self._lists: dict[tuple, dict[str, RankedList]] = {}

    def ranked(self, instruction: str, k: int | None = None) -> dict[str, RankedList]:
        k = self.cfg.k_retrieved if k is None else k
        key = (instruction, k)
        hit = self._lists.get(key)
        if hit is None:
            q = embed_text(instruction, EmbedderConfig(self.index.dim))
            hit = {v: mips_topk(self.index.for_view(v), q, k) for v in self.cfg.views}
            self._lists[key] = hit
        return hit

    def memories(self, instruction: str) -> list[MemoryInputs]:
        lists = self.ranked(instruction)
        out = []
        for v in self.cfg.views:
            out.extend(self.encoder.inputs(lists[v]))
        return out


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    policy: Policy
    losses: list[float] = field(default_factory=list)


def _group_indices(samples, idx):
    groups: dict[tuple, list[int]] = {}
    for i in idx:
        s = samples[i]
        key = (s["grid"].shape, tuple(m.video.shape[0] for m in s["memories"]))
        groups.setdefault(key, []).append(i)
    return list(groups.values())


def train_on_samples(samples: Sequence[dict], targets: Sequence[np.ndarray], cfg: PolicyConfig,
                     steps: int | None = None, log_every: int = 0) -> TrainResult:
    """Minibatch Adam on the L1 chunk loss; data order from a seeded shuffle per epoch."""
    if not samples:
        raise EmptyDataset("no training samples")
    steps = cfg.steps if steps is None else steps
    policy = Policy(cfg)
    rng = np.random.default_rng(cfg.seed + 7919)
    drop_rng = np.random.default_rng(cfg.seed + 104729)
    n = len(samples)
    bs = min(cfg.batch_size, n)
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    order = rng.permutation(n)
    cursor = 0
    losses = []
    for step in range(steps):
        if cursor + bs > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + bs]
        cursor += bs
        grads: dict[str, np.ndarray] = {}
        loss = 0.0
        for grp in _group_indices(samples, idx):
            batch = stack_samples([samples[i] for i in grp], cfg)
            tgt = np.stack([targets[i] for i in grp])
            if cfg.text_dropout:
                batch.text[drop_rng.random(len(grp)) < cfg.text_dropout] = 0.0
            pred, cache = policy.forward(batch)
            w = len(grp) / len(idx)
            loss += w * bc_loss(pred, tgt)
            gr = policy.backward(w * bc_loss_grad(pred, tgt), cache)
            for k, v in gr.items():
                grads[k] = grads[k] + v if k in grads else v
        nn.adam_step(policy.store, grads, cfg.lr)
        losses.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:5d}  loss {loss:.4f}", flush=True)
    return TrainResult(policy, losses)


def chunk_targets(actions: np.ndarray, horizon: int) -> list[np.ndarray]:
    """Per-step expert chunks; steps past the end repeat the final action."""
    actions = np.asarray(actions, dtype=np.float64)
    T = actions.shape[0]
    idx = np.minimum(np.arange(T)[:, None] + np.arange(horizon)[None, :], T - 1)
    return list(actions[idx])


def build_samples(demos, ctx: RetrievalContext | None, cfg: PolicyConfig):
    """Flatten demos into (samples, targets), retrieving memories per instruction."""
    if not demos:
        raise EmptyDataset("no demonstrations")
    proj = projection_matrix(cfg.featurizer)
    samples, targets = [], []
    for demo in demos:
        text = embed_text(demo.instruction, cfg.embedder)
        mems = ctx.memories(demo.instruction) if (cfg.use_retrieval and ctx is not None) else None
        if cfg.use_retrieval and not mems:
            raise EmptyDataset("retrieval policy needs a non-empty bank")
        chunks = chunk_targets(demo.actions, cfg.horizon)
        for t, obs in enumerate(demo.observations):
            grid = observation_tokens([obs.frames[v] for v in cfg.views], cfg, proj)
            samples.append(make_sample(grid, obs.proprio, text, mems))
            targets.append(chunks[t])
    return samples, targets


def train(demos, bank: Bank | None, index: RetrievalIndex | None, cfg: PolicyConfig,
          steps: int | None = None, log_every: int = 0) -> TrainResult:
    """Behaviour cloning with retrieval at train time (same query path as at test time)."""
    ctx = RetrievalContext(bank, index, cfg) if (cfg.use_retrieval and bank is not None) else None
    if cfg.use_retrieval and ctx is None:
        raise EmptyDataset("retrieval policy needs a bank and index")
    samples, targets = build_samples(demos, ctx, cfg)
    return train_on_samples(samples, targets, cfg, steps, log_every)


# --------------------------------------------------------------- execution


def ensemble_weights(n: int, m: float = 0.1) -> np.ndarray:
    """Normalised exp(-m*i) weights, i = 0 for the oldest prediction."""
    w = np.exp(-m * np.arange(n))
    return w / w.sum()


class ChunkEnsembler:
    """Temporal ensembling over overlapping action chunks."""

    def __init__(self, horizon: int, m: float = 0.1, enabled: bool = True):
        self.horizon = horizon
        self.m = m
        self.enabled = enabled
        self.t = 0
        self._chunks: list[tuple[int, np.ndarray]] = []

    def reset(self) -> None:
        self.t = 0
        self._chunks.clear()

    def step(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk, dtype=np.float64)
        t = self.t
        self.t += 1
        if not self.enabled:
            return chunk[0].copy()
        self._chunks.append((t, chunk))
        self._chunks = [(t0, ch) for t0, ch in self._chunks if t - t0 < ch.shape[0]]
        preds = np.stack([ch[t - t0] for t0, ch in self._chunks])  # oldest first
        return ensemble_weights(len(preds), self.m) @ preds


def act(policy: Policy, obs, ctx: RetrievalContext | None, ensembler: ChunkEnsembler | None = None):
    """Next action for one observation (predicts a fresh chunk every call)."""
    cfg = policy.cfg
    grid = policy.observation_tokens([obs.frames[v] for v in cfg.views])
    mems = ctx.memories(obs.instruction) if cfg.use_retrieval else None
    sample = make_sample(grid, obs.proprio, embed_text(obs.instruction, cfg.embedder), mems)
    chunk = policy.predict(stack_samples([sample], cfg))[0]
    if ensembler is None:
        return chunk[0]
    return ensembler.step(chunk)


def with_overrides(cfg: PolicyConfig, **kw) -> PolicyConfig:
    return replace(cfg, **kw)
