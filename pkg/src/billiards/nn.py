"""Small numpy neural stack with hand-written backward passes.

Layers follow the forward/backward-with-cache convention: ``*_forward`` returns
``(out, cache)`` and ``*_backward`` consumes the upstream gradient and that cache.
Parameters live in flat ``dict[str, ndarray]`` so optimisers and checkpoints treat
every model the same way.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .features import SLOTS_PER_BALL
from .tokens import Vocabulary, total_vocab

Params = Dict[str, np.ndarray]

LOG_CLAMP = 1e-7


class NumericalError(FloatingPointError):
    """A loss or gradient went non-finite."""


@dataclass(frozen=True)
class NetConfig:
    embed_dim: int = 10
    filter_widths: Tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7)
    filters_total: int = 156
    l2_lambda: float = 1e-3
    learning_rate: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.filters_total < len(self.filter_widths):
            raise ValueError("need at least one filter per width")
        if min(self.filter_widths) < 1:
            raise ValueError("filter widths must be >= 1")

    @property
    def K(self) -> int:
        return self.filters_total

    @property
    def K_prime(self) -> int:
        return self.embed_dim * SLOTS_PER_BALL

    def width_counts(self) -> Dict[int, int]:
        """Filters cycle through the widths: 156 over 1..7 gives 23, 23, 22, 22, 22, 22, 22."""
        counts = {h: 0 for h in self.filter_widths}
        for f in range(self.filters_total):
            counts[self.filter_widths[f % len(self.filter_widths)]] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "filter_widths": list(self.filter_widths),
            "filters_total": self.filters_total,
            "l2_lambda": self.l2_lambda,
            "learning_rate": self.learning_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["filter_widths"] = tuple(d["filter_widths"])
        return cls(**d)


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(cfg: NetConfig, voc: Vocabulary, n_balls: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    if max(cfg.filter_widths) > n_balls:
        raise ValueError("filter wider than the number of balls")
    p: Params = {"embed": rng.uniform(-0.05, 0.05, size=(total_vocab(voc), cfg.embed_dim)).astype(dtype)}
    Kp = cfg.K_prime
    for h, F in cfg.width_counts().items():
        p[f"conv{h}.W"] = glorot(rng, (F, h * Kp), h * Kp, F, dtype)
        p[f"conv{h}.b"] = np.zeros(F, dtype=dtype)
    return p


def init_dense(params: Params, name: str, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32) -> Params:
    params[f"{name}.W"] = glorot(rng, (n_in, n_out), n_in, n_out, dtype)
    params[f"{name}.b"] = np.zeros(n_out, dtype=dtype)
    return params


# --------------------------------------------------------------------------- layers


def embed_forward(table: np.ndarray, ids: np.ndarray):
    """``ids`` ``(B, n, S)`` -> ``(B, n, S*d)``: per ball, the slot embeddings concatenated."""
    B, n, S = ids.shape
    out = table[ids].reshape(B, n, S * table.shape[1])
    return out, (ids, table.shape)


def embed_backward(dout: np.ndarray, cache):
    ids, shape = cache
    d = shape[1]
    grad = np.zeros(shape, dtype=dout.dtype)
    np.add.at(grad, ids.ravel(), dout.reshape(-1, d))
    return grad


def conv_forward(X: np.ndarray, W: np.ndarray, b: np.ndarray, h: int):
    """Valid 1-D convolution over the ball axis.

    ``X`` ``(B, n, K')``, ``W`` ``(F, h*K')`` -> feature maps ``(B, n-h+1, F)``.
    """
    win = sliding_window_view(X, h, axis=1)  # (B, L, K', h)
    B, L = win.shape[:2]
    Xw = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(B, L, -1)  # window rows ball-major
    C = Xw @ W.T + b
    return C, (Xw, W, h, X.shape)


def conv_backward(dC: np.ndarray, cache):
    Xw, W, h, xshape = cache
    B, L, F = dC.shape
    Kp = xshape[2]
    dW = dC.reshape(-1, F).T @ Xw.reshape(-1, Xw.shape[2])
    db = dC.sum(axis=(0, 1))
    dXw = dC @ W  # (B, L, h*K')
    dX = np.zeros(xshape, dtype=dC.dtype)
    for o in range(h):
        dX[:, o : o + L, :] += dXw[:, :, o * Kp : (o + 1) * Kp]
    return dX, dW, db


def relu_maxpool_forward(C: np.ndarray):
    """ReLU then global max over positions; ties go to the first maximiser."""
    idx = np.argmax(C, axis=1)  # (B, F)
    top = np.take_along_axis(C, idx[:, None, :], axis=1)[:, 0, :]
    return np.maximum(top, 0.0), (idx, top, C.shape)


def relu_maxpool_backward(dout: np.ndarray, cache):
    idx, top, shape = cache
    g = np.where(top > 0.0, dout, 0.0)
    dC = np.zeros(shape, dtype=dout.dtype)
    np.put_along_axis(dC, idx[:, None, :], g[:, None, :], axis=1)
    return dC


def dense_forward(x, W, b):
    return x @ W + b, (x, W)


def dense_backward(dout, cache):
    x, W = cache
    return dout @ W.T, x.T @ dout, dout.sum(axis=0)


# --------------------------------------------------------------------------- encoder


def encoder_widths(params: Params) -> List[int]:
    return sorted(int(k[4:-2]) for k in params if k.startswith("conv") and k.endswith(".W"))


def encode_forward(params: Params, ids: np.ndarray, ops=None):
    """Global token ids ``(B, n, 27)`` -> layout vectors ``(B, K)``.

    ``ops``, if given, is a one-element list incremented by the arithmetic work done:
    one per embedding value copied, one per convolution multiply-add, one per
    pooling comparison.
    """
    X, ecache = embed_forward(params["embed"], ids)
    if ops is not None:
        ops[0] += X.size
    outs, caches = [], []
    for h in encoder_widths(params):
        C, ccache = conv_forward(X, params[f"conv{h}.W"], params[f"conv{h}.b"], h)
        v, pcache = relu_maxpool_forward(C)
        if ops is not None:
            ops[0] += C.size * params[f"conv{h}.W"].shape[1] + C.size
        outs.append(v)
        caches.append((h, ccache, pcache))
    return np.concatenate(outs, axis=1), (ecache, caches, X.shape)


def encode_backward(dv: np.ndarray, cache) -> Params:
    ecache, caches, xshape = cache
    grads: Params = {}
    dX = np.zeros(xshape, dtype=dv.dtype)
    col = 0
    for h, ccache, pcache in caches:
        F = pcache[1].shape[1]
        dC = relu_maxpool_backward(dv[:, col : col + F], pcache)
        col += F
        dXh, dW, db = conv_backward(dC, ccache)
        dX += dXh
        grads[f"conv{h}.W"] = dW
        grads[f"conv{h}.b"] = db
    grads["embed"] = embed_backward(dX, ecache)
    return grads


def encode(params: Params, ids: np.ndarray, batch: int = 2048) -> np.ndarray:
    """Inference-only forward in chunks."""
    if len(ids) == 0:
        K = sum(params[f"conv{h}.b"].shape[0] for h in encoder_widths(params))
        return np.zeros((0, K), dtype=params["embed"].dtype)
    return np.concatenate([encode_forward(params, ids[i : i + batch])[0] for i in range(0, len(ids), batch)])


# --------------------------------------------------------------------------- losses


def triplet(d_pos: float, d_neg: float, margin: float) -> float:
    return max(d_pos - d_neg + margin, 0.0)


def triplet_loss(vq: np.ndarray, vp: np.ndarray, vn: np.ndarray, margin: float):
    """Mean hinge over a batch; returns ``(loss, (dvq, dvp, dvn), d_pos, d_neg)``."""
    B = vq.shape[0]
    ep = vq - vp
    en = vq - vn
    dp = np.sqrt((ep * ep).sum(axis=1))
    dn = np.sqrt((en * en).sum(axis=1))
    h = dp - dn + margin
    active = (h > 0).astype(vq.dtype)
    loss = float(np.maximum(h, 0.0).mean())
    with np.errstate(invalid="ignore", divide="ignore"):
        up = np.where(dp[:, None] > 0, ep / dp[:, None], 0.0)
        un = np.where(dn[:, None] > 0, en / dn[:, None], 0.0)
    gp = (active / B)[:, None] * up
    gn = (active / B)[:, None] * un
    return loss, (gp - gn, -gp, gn), dp, dn


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels):
    """Mean softmax cross-entropy; returns ``(loss, dlogits)``. Works on one row or a batch."""
    single = logits.ndim == 1
    z = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels))
    z0 = z - z.max(axis=1, keepdims=True)
    logp = z0 - np.log(np.exp(z0).sum(axis=1, keepdims=True))
    B = z.shape[0]
    loss = float(-logp[np.arange(B), y].mean())
    d = np.exp(logp)
    d[np.arange(B), y] -= 1.0
    d /= B
    return loss, (d[0] if single else d)


def bce(prob, label):
    """Binary cross-entropy on probabilities clamped to ``[1e-7, 1 - 1e-7]``; returns ``(loss, dprob)``."""
    p = np.asarray(prob, dtype=np.float64)
    y = np.asarray(label, dtype=np.float64)
    pc = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > LOG_CLAMP) & (p < 1.0 - LOG_CLAMP)
    dprob = np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / max(p.size, 1)
    return float(loss.mean()), dprob


def sigmoid(z):
    z = np.asarray(z)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


# --------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    t: int = 0


def adam_step(params: Params, grads: Params, state: AdamState, lr: float, l2: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Tuple[Params, AdamState]:
    """One Adam update with ``l2 * theta`` added to each gradient; updates ``params`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {k!r} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, g in grads.items():
        p = params[k]
        g = g + l2 * p if l2 else g
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, state


def cast_params(params: Params, dtype) -> Params:
    return {k: v.astype(dtype) for k, v in params.items()}


class EarlyStopping:
    """Track the best validation score and stop after ``patience`` evaluations without improvement."""

    def __init__(self, patience: int, min_delta: float = 1e-6):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_params: Params = None
        self.bad = 0

    def update(self, score: float, params: Params) -> bool:
        """Record one evaluation (lower is better); returns True when training should stop."""
        if score < self.best - self.min_delta:
            self.best = score
            self.best_params = {k: v.copy() for k, v in params.items()}
            self.bad = 0
            return False
        self.bad += 1
        return self.bad >= self.patience
