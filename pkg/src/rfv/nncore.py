"""Small differentiable kernel: paired forward/backward ops, Adam, seeded init.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward(dout, cache)`` returns input gradients followed by parameter
gradients. All ops accept arbitrary leading batch dimensions and run in
float64.
"""

from __future__ import annotations

import json
import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .blob import read_blob, write_blob
from .errors import CorruptManifest, ShapeMismatch

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


# ------------------------------------------------------------------- linear


def linear_forward(x, W, b):
    _check(x.shape[-1] == W.shape[0], f"linear: input {x.shape} vs weight {W.shape}")
    _check(b.shape == (W.shape[1],), f"linear: bias {b.shape} vs weight {W.shape}")
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dx, dW, db


# ---------------------------------------------------------------- layernorm


def layernorm_forward(x, g, b, eps=1e-5):
    _check(g.shape == (x.shape[-1],) and b.shape == g.shape, "layernorm: gain/bias shape")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layernorm_backward(dy, cache):
    xhat, rstd, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


# ------------------------------------------------------------------ softmax


def softmax_forward(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return y, y


def softmax_backward(dy, cache):
    y = cache
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# --------------------------------------------------------------------- gelu


def gelu_forward(x):
    u = _SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# ---------------------------------------------------------------------- mlp


def mlp_forward(x, W1, b1, W2, b2):
    h, c1 = linear_forward(x, W1, b1)
    a, cg = gelu_forward(h)
    y, c2 = linear_forward(a, W2, b2)
    return y, (c1, cg, c2)


def mlp_backward(dy, cache):
    c1, cg, c2 = cache
    da, dW2, db2 = linear_backward(dy, c2)
    dh = gelu_backward(da, cg)
    dx, dW1, db1 = linear_backward(dh, c1)
    return dx, dW1, db1, dW2, db2


# ---------------------------------------------------------------------- mha

MHA_KEYS = ("Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo")


def _split(x, heads):
    *lead, L, d = x.shape
    return x.reshape(*lead, L, heads, d // heads).swapaxes(-2, -3)


def _merge(x):
    *lead, h, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, h * dh)


def mha_forward(xq, xk, xv, p, heads):
    """Multi-head scaled dot-product attention.

    ``xq`` (..., Lq, d) supplies queries, ``xk``/``xv`` (..., Lk, d) keys and
    values. ``p`` maps MHA_KEYS to weights. Returns (out, cache); the attention
    weights are ``cache["attn"]`` with shape (..., heads, Lq, Lk).
    """
    d = xq.shape[-1]
    _check(d % heads == 0, f"heads={heads} must divide d_model={d}")
    _check(xk.shape[-2] == xv.shape[-2], "mha: key/value lengths differ")
    _check(xk.shape[-1] == d and xv.shape[-1] == d, "mha: model dims differ")
    q, cq = linear_forward(xq, p["Wq"], p["bq"])
    k, ck = linear_forward(xk, p["Wk"], p["bk"])
    v, cv = linear_forward(xv, p["Wv"], p["bv"])
    qh, kh, vh = _split(q, heads), _split(k, heads), _split(v, heads)
    scale = 1.0 / math.sqrt(d // heads)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale
    attn, _ = softmax_forward(scores)
    oh = attn @ vh
    o = _merge(oh)
    out, co = linear_forward(o, p["Wo"], p["bo"])
    return out, {"cq": cq, "ck": ck, "cv": cv, "co": co, "qh": qh, "kh": kh, "vh": vh,
                 "attn": attn, "scale": scale, "heads": heads}


def mha_backward(dout, cache):
    """Returns (dxq, dxk, dxv, grads) where grads maps MHA_KEYS to arrays."""
    heads = cache["heads"]
    do, dWo, dbo = linear_backward(dout, cache["co"])
    doh = _split(do, heads)
    attn, vh, qh, kh = cache["attn"], cache["vh"], cache["qh"], cache["kh"]
    dattn = doh @ vh.swapaxes(-1, -2)
    dvh = attn.swapaxes(-1, -2) @ doh
    dscores = softmax_backward(dattn, attn) * cache["scale"]
    dqh = dscores @ kh
    dkh = dscores.swapaxes(-1, -2) @ qh
    dxq, dWq, dbq = linear_backward(_merge(dqh), cache["cq"])
    dxk, dWk, dbk = linear_backward(_merge(dkh), cache["ck"])
    dxv, dWv, dbv = linear_backward(_merge(dvh), cache["cv"])
    grads = {"Wq": dWq, "bq": dbq, "Wk": dWk, "bk": dbk, "Wv": dWv, "bv": dbv,
             "Wo": dWo, "bo": dbo}
    return dxq, dxk, dxv, grads


# --------------------------------------------------------------------- init


def seeded_init(shape, scheme: str = "uniform", seed: int = 0, std: float = 0.02) -> np.ndarray:
    """Deterministic parameter tensor.

    ``uniform``: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with fan_in = shape[0];
    ``normal``: N(0, std^2); ``zeros``; ``ones``.
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    rng = np.random.default_rng(seed)
    if scheme == "uniform":
        bound = 1.0 / math.sqrt(shape[0])
        return rng.uniform(-bound, bound, size=shape)
    if scheme == "normal":
        return rng.normal(0.0, std, size=shape)
    raise ValueError(f"unknown init scheme {scheme!r}")


def param_seed(seed: int, name: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


# ------------------------------------------------------------------ storage


@dataclass
class ParameterStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def adam_step(store: ParameterStore, grads: dict[str, np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """In-place Adam update with bias correction; parameters without a gradient are skipped."""
    for name, g in grads.items():
        p = store.params.get(name)
        if p is None:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in store.params:  # fixed order keeps updates deterministic
        g = grads.get(name)
        if g is None:
            continue
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return store


def save_params(store: ParameterStore, path: str | os.PathLike) -> None:
    """Write ``params.json`` (names, shapes, offsets) and ``params.rfvb`` (f64)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    layout, chunks, off = [], [], 0
    for name, p in store.params.items():
        layout.append({"name": name, "shape": list(p.shape), "offset": off})
        chunks.append(p.ravel())
        off += p.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    write_blob(root / "params.rfvb", flat.astype("<f8"))
    (root / "params.json").write_text(
        json.dumps({"step": store.step, "params": layout}, indent=1) + "\n", encoding="utf-8")


def load_params(path: str | os.PathLike) -> ParameterStore:
    root = Path(path)
    try:
        meta = json.loads((root / "params.json").read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise CorruptManifest(f"bad checkpoint layout in {root}: {exc}") from exc
    flat = read_blob(root / "params.rfvb")
    if flat.dtype != np.float64:
        raise CorruptManifest("checkpoint payload must be f64")
    store = ParameterStore(step=int(meta.get("step", 0)))
    for rec in meta["params"]:
        size = int(np.prod(rec["shape"])) if rec["shape"] else 1
        chunk = flat[rec["offset"]: rec["offset"] + size]
        if chunk.size != size:
            raise CorruptManifest(f"checkpoint truncated at {rec['name']}")
        store.add(rec["name"], chunk.reshape(rec["shape"]))
    return store
