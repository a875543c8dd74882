"""Building blocks shared by the prompt encoder and the denoiser."""
from __future__ import annotations

import numpy as np

from .numerics import Module, Parameter, Tensor, init_weight, ops


class Linear(Module):
    """x @ W + b, with an optional low-rank update (scale / r) * (x @ A) @ B."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 name: str = ""):
        self.d_in, self.d_out = d_in, d_out
        self.w = Parameter(init_weight(rng, (d_in, d_out), d_in), name=f"{name}.w")
        self.b = Parameter(np.zeros(d_out, np.float32), name=f"{name}.b") if bias else None
        self.lora_a: Parameter | None = None
        self.lora_b: Parameter | None = None
        self.lora_scale = 0.0
        self.rank = 0

    def add_lora(self, rank: int, scale: float, rng: np.random.Generator) -> None:
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        dtype = self.w.dtype
        self.rank = rank
        self.lora_scale = scale / rank
        self.lora_a = Parameter(init_weight(rng, (self.d_in, rank), self.d_in).astype(dtype),
                                name=f"{self.w.name}.lora_a")
        self.lora_b = Parameter(np.zeros((rank, self.d_out), dtype), name=f"{self.w.name}.lora_b")

    def __call__(self, x: Tensor) -> Tensor:
        out = ops.linear(x, self.w, self.b)
        if self.lora_a is not None:
            delta = ops.linear(ops.linear(x, self.lora_a), self.lora_b)
            out = ops.add(out, ops.scale(delta, self.lora_scale))
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3,
                 stride: int = 1, name: str = ""):
        self.stride = stride
        self.w = Parameter(init_weight(rng, (c_out, c_in, k, k), c_in * k * k), name=f"{name}.w")
        self.b = Parameter(np.zeros(c_out, np.float32), name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.w, self.b, stride=self.stride)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int, name: str = ""):
        self.groups = groups
        self.gamma = Parameter(np.ones(channels, np.float32), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, np.float32), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.gamma, self.beta, self.groups)


class LayerNorm(Module):
    def __init__(self, dim: int, name: str = ""):
        self.gamma = Parameter(np.ones(dim, np.float32), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim, np.float32), name=f"{name}.beta")

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Multi-head attention with q, k, v, o projections.

    ``bias`` is a constant (B, Lk) additive logit bias.
    """

    PROJECTIONS = ("q", "k", "v", "o")

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None,
                 name: str = ""):
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, bias=False, name=f"{name}.q")
        self.k = Linear(kv_dim, dim, rng, bias=False, name=f"{name}.k")
        self.v = Linear(kv_dim, dim, rng, bias=False, name=f"{name}.v")
        self.o = Linear(dim, dim, rng, name=f"{name}.o")

    def __call__(self, x: Tensor, context: Tensor | None = None,
                 bias: np.ndarray | None = None) -> Tensor:
        ctx = x if context is None else context
        h = ops.attention(self.q(x), self.k(ctx), self.v(ctx), self.heads, bias)
        return self.o(h)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, name: str = ""):
        self.fc1 = Linear(dim, hidden, rng, name=f"{name}.fc1")
        self.fc2 = Linear(hidden, dim, rng, name=f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))
