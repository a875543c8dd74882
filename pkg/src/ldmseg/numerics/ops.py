"""Differentiable kernels.

Every kernel takes Tensors (or plain numbers where noted), computes its forward
value with numpy and attaches a backward rule.  Broadcasting is limited to
scalar operands and per-channel bias; anything else goes through an explicit
``reshape``/``expand``.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import Tensor, make_node

MASKED_LOGIT = -1e9
_GELU_C = math.sqrt(2.0 / math.pi)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating)) or (isinstance(x, np.ndarray) and x.ndim == 0)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(a, float(b))
    if _is_scalar(a):
        return shift(b, float(a))
    a, b = as_tensor(a), as_tensor(b, a)
    _check_same("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return shift(a, -float(b))
    a, b = as_tensor(a), as_tensor(b, a)
    _check_same("sub", a, b)
    return make_node(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def shift(a: Tensor, c: float) -> Tensor:
    return make_node(a.data + a.dtype.type(c), (a,), lambda g: (g,), "shift")


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    if _is_scalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b, a)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_node(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scale")


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """x: (N, C, ...) plus b: (C,) or (N, C), broadcast over trailing axes."""
    if b.ndim == 1:
        if b.shape[0] != x.shape[1]:
            raise ValueError(f"channel_bias: {b.shape} vs channels of {x.shape}")
        view = (1, -1) + (1,) * (x.ndim - 2)
        red = (0,) + tuple(range(2, x.ndim))
    elif b.ndim == 2:
        if b.shape != x.shape[:2]:
            raise ValueError(f"channel_bias: {b.shape} vs {x.shape}")
        view = b.shape + (1,) * (x.ndim - 2)
        red = tuple(range(2, x.ndim))
    else:
        raise ValueError("channel_bias: bias must be 1-D or 2-D")
    out = x.data + b.data.reshape(view)
    return make_node(out, (x, b), lambda g: (g, g.sum(axis=red)), "channel_bias")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    sig = expit(xd)
    return make_node(xd * sig, (x,), lambda g: (_silu_backward(xd, sig, g),), "silu")


def _silu_backward(x, sig, g):
    return g * sig * (1.0 + x * (1.0 - sig))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * dinner),)

    return make_node(out, (x,), bw, "gelu")


def where(cond: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array broadcastable to a.shape."""
    _check_same("where", a, b)
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    zero = a.dtype.type(0)
    return make_node(np.where(c, a.data, b.data), (a, b),
                     lambda g: (np.where(c, g, zero), np.where(c, zero, g)), "where")


# ---------------------------------------------------------------- reductions

def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return make_node(np.asarray(x.data.mean()), (x,),
                     lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared differences."""
    target = as_tensor(target, pred)
    _check_same("mse", pred, target)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        d = diff * (2.0 * g / n)
        return d, -d

    return make_node(np.asarray(np.mean(diff * diff)), (pred, target), bw, "mse")


# ---------------------------------------------------------------- shape ops

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_node(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.data for x in xs], axis=axis)
    return make_node(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat along axes where ``x`` has extent 1 (same rank required)."""
    shape = tuple(shape)
    if x.ndim != len(shape):
        raise ValueError(f"expand: rank {x.ndim} vs {len(shape)}")
    axes = tuple(i for i, (s, t) in enumerate(zip(x.shape, shape)) if s != t)
    for i in axes:
        if x.shape[i] != 1:
            raise ValueError(f"expand: cannot expand {x.shape} to {shape}")
    out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    return make_node(out, (x,), lambda g: (g.sum(axis=axes, keepdims=True),), "expand")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched (..., M, K) @ (..., K, N) with identical leading axes."""
    if a.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return make_node(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., K) @ w (K, N) [+ b (N,)]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear: bias {b.shape} for output {w.shape[1]}")
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    wd = w.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],))
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "linear")


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """NCHW cross-correlation, odd square kernel, zero padding k//2, stride 1 or 2."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d: expected 4-D input and weight")
    n, c, h, wd_ = x.shape
    o, c2, k, k2 = w.shape
    if c != c2 or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: input {x.shape} vs weight {w.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    p = k // 2
    ho, wo = (h + 2 * p - k) // stride + 1, (wd_ + 2 * p - k) // stride + 1
    # columns laid out (n, ho, wo, ky, kx, c) so every copy below is channel-contiguous
    xpt = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))).transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, :, :, ky, kx, :] = xpt[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :]
    cols = cols.reshape(n * ho * wo, k * k * c)
    wm = w.data.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    out = cols @ wm.T
    if b is not None:
        out += b.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2)
        gcols = (gm @ wm).reshape(n, ho, wo, k, k, c)
        gxp = _conv_input_grad(gcols, n, c, h, wd_, k, stride)
        gx = gxp[:, p:p + h, p:p + wd_, :].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return make_node(out, parents, bw, "conv2d")


def _conv_input_grad(gcols, n, c, h, w, k, stride):
    """Scatter-add column gradients back onto the padded NHWC input grid."""
    p = k // 2
    _, ho, wo = gcols.shape[:3]
    gxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=gcols.dtype)
    for ky in range(k):
        for kx in range(k):
            gxp[:, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride, :] += gcols[:, :, :, ky, kx, :]
    return gxp


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return make_node(out, (x,), bw, "upsample2x")


# ---------------------------------------------------------------- normalization

def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    n, c = x.shape[:2]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    view = (1, c) + (1,) * (x.ndim - 2)
    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    red = (0,) + tuple(range(2, x.ndim))

    def bw(g):
        gg = (xhat * g).sum(axis=red)
        gb = g.sum(axis=red)
        dxhat = (g * gamma.data.reshape(view)).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        dx = inv * (dxhat - dxhat.mean(axis=2, keepdims=True)
                    - xh * (dxhat * xh).mean(axis=2, keepdims=True))
        return dx.reshape(x.shape), gg, gb

    return make_node(out, (x, gamma, beta), bw, "group_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_node(out, (x, gamma, beta), bw, "layer_norm")


# ---------------------------------------------------------------- softmax / attention

def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_node(s, (x,), bw, "softmax")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
              bias: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (B, Lq, D); k, v: (B, Lk, D).  ``bias`` is a constant additive logit
    bias of shape (B, Lk) applied to every query and head.
    """
    b_, lq, d = q.shape
    lk = k.shape[1]
    if k.shape != (b_, lk, d) or v.shape != (b_, lk, d):
        raise ValueError(f"attention: q {q.shape} k {k.shape} v {v.shape}")
    if d % heads:
        raise ValueError(f"attention: dim {d} not divisible by {heads} heads")
    dh = d // heads
    sc = q.dtype.type(1.0 / math.sqrt(dh))

    def split(a, L):
        return a.reshape(b_, L, heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q.data, lq), split(k.data, lk), split(v.data, lk)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) * sc
    if bias is not None:
        bias = np.asarray(bias, dtype=q.dtype)
        if bias.shape != (b_, lk):
            raise ValueError(f"attention: bias {bias.shape}, expected {(b_, lk)}")
        logits = logits + bias[:, None, None, :]
    p = _softmax(logits, -1)
    out = (p @ vh).transpose(0, 2, 1, 3).reshape(b_, lq, d)

    def bw(g):
        gh = split(g, lq)
        gv = p.transpose(0, 1, 3, 2) @ gh
        gp = gh @ vh.transpose(0, 1, 3, 2)
        gs = _attention_logit_backward(p, gp) * sc
        gq = gs @ kh
        gk = gs.transpose(0, 1, 3, 2) @ qh

        def merge(a, L):
            return a.transpose(0, 2, 1, 3).reshape(b_, L, d)

        return merge(gq, lq), merge(gk, lk), merge(gv, lk)

    return make_node(out, (q, k, v), bw, "attention")


def _attention_logit_backward(p, gp):
    return p * (gp - (gp * p).sum(axis=-1, keepdims=True))


def attention_weights(q: np.ndarray, k: np.ndarray, heads: int,
                      bias: np.ndarray | None = None) -> np.ndarray:
    """Forward-only attention probabilities (B, heads, Lq, Lk), for inspection."""
    b_, lq, d = q.shape
    lk = k.shape[1]
    dh = d // heads
    qh = q.reshape(b_, lq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(b_, lk, heads, dh).transpose(0, 2, 1, 3)
    logits = (qh @ kh.transpose(0, 1, 3, 2)) / math.sqrt(dh)
    if bias is not None:
        logits = logits + np.asarray(bias, dtype=q.dtype)[:, None, None, :]
    return _softmax(logits, -1)


# ---------------------------------------------------------------- embeddings

def sinusoidal_table(t: np.ndarray, dim: int, max_period: float = 10000.0,
                     dtype=np.float32) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb.astype(dtype)


def timestep_embedding(t, dim: int, dtype=np.float32) -> Tensor:
    """Sinusoidal embedding lookup for integer timesteps; constant w.r.t. parameters."""
    return Tensor(sinusoidal_table(t, dim, dtype=dtype), op="timestep_embedding")
