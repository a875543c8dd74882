"""Instruction tokens from visual prompts.

A small ViT-style encoder turns a prompt image into patch tokens (the class
token is dropped), the prompt mask becomes per-token foreground fractions, and
one linear adapter per cross-attention layer maps tokens to that layer's width.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .layers import Attention, FeedForward, LayerNorm, Linear
from .numerics import Module, Parameter, Tensor, ops
from .numerics.tensor import make_node

BIAS_FLOOR = 1e-6


@dataclass(frozen=True)
class PromptEncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch_size}")

    @property
    def token_grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def n_tokens(self) -> int:
        gh, gw = self.token_grid
        return gh * gw


@dataclass
class InstructionTokens:
    """Batched tokens (B, L, d) with per-token foreground fractions and a padding mask."""

    tokens: Tensor
    fg_weights: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        b, L = self.tokens.shape[:2]
        self.fg_weights = np.asarray(self.fg_weights, dtype=np.float64).reshape(b, L)
        self.valid = np.asarray(self.valid, dtype=bool).reshape(b, L)

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]

    def logit_bias(self) -> np.ndarray:
        return token_bias(self.fg_weights, self.valid)


class _EncoderBlock(Module):
    def __init__(self, dim: int, heads: int, rng, name: str):
        self.ln1 = LayerNorm(dim, f"{name}.ln1")
        self.attn = Attention(dim, heads, rng, name=f"{name}.attn")
        self.ln2 = LayerNorm(dim, f"{name}.ln2")
        self.mlp = FeedForward(dim, 2 * dim, rng, name=f"{name}.mlp")

    def __call__(self, x: Tensor) -> Tensor:
        x = ops.add(x, self.attn(self.ln1(x)))
        return ops.add(x, self.mlp(self.ln2(x)))


class PromptEncoder(Module):
    def __init__(self, cfg: PromptEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        p, d = cfg.patch_size, cfg.embed_dim
        self.patch = Linear(3 * p * p, d, rng, name="enc.patch")
        self.cls = Parameter((rng.standard_normal((1, 1, d)) * 0.02).astype(np.float32), name="enc.cls")
        self.pos = Parameter((rng.standard_normal((1, cfg.n_tokens + 1, d)) * 0.02).astype(np.float32),
                             name="enc.pos")
        self.blocks = [_EncoderBlock(d, cfg.heads, rng, f"enc.block{i}") for i in range(cfg.depth)]
        self.ln = LayerNorm(d, "enc.ln")

    def patchify(self, images: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) -> (B, n_tokens, 3*p*p), raster order over the patch grid."""
        images = np.asarray(images)
        s, p = self.cfg.image_size, self.cfg.patch_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ValueError(f"prompt images must be (B, 3, {s}, {s}), got {images.shape}")
        b = images.shape[0]
        g = s // p
        x = images.reshape(b, 3, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(b, g * g, 3 * p * p)

    def __call__(self, images: np.ndarray) -> Tensor:
        """Last hidden states without the class token: (B, n_tokens, d)."""
        patches = self.patchify(images).astype(self.patch.w.dtype)
        b = patches.shape[0]
        x = self.patch(Tensor(patches))
        d = self.cfg.embed_dim
        cls = ops.expand(self.cls, (b, 1, d))
        x = ops.concat([cls, x], axis=1)
        x = ops.add(x, ops.expand(self.pos, (b, self.cfg.n_tokens + 1, d)))
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        x = ops.reshape(x, (b * (self.cfg.n_tokens + 1), d))
        # drop the first (class) token of every sequence
        keep = np.ones(b * (self.cfg.n_tokens + 1), dtype=bool)
        keep[:: self.cfg.n_tokens + 1] = False
        return _take_rows(x, keep, (b, self.cfg.n_tokens, d))


def _take_rows(x: Tensor, keep: np.ndarray, shape) -> Tensor:
    rows = np.flatnonzero(keep)
    src = x.shape

    def bw(g):
        full = np.zeros(src, dtype=g.dtype)
        full[rows] = g.reshape(len(rows), -1)
        return (full,)

    return make_node(x.data[rows].reshape(shape), (x,), bw, "take_rows")


def foreground_token_weights(mask: np.ndarray, token_grid: tuple[int, int]) -> np.ndarray:
    """Fraction of foreground pixels in each patch, raster order. mask: (H, W) or (B, H, W)."""
    m = np.asarray(mask, dtype=np.float64)
    squeeze = m.ndim == 2
    if squeeze:
        m = m[None]
    b, h, w = m.shape
    gh, gw = token_grid
    if h % gh or w % gw:
        raise ValueError(f"mask {h}x{w} not divisible into a {gh}x{gw} token grid")
    ph, pw = h // gh, w // gw
    frac = m.reshape(b, gh, ph, gw, pw).mean(axis=(2, 4)).reshape(b, gh * gw)
    return frac[0] if squeeze else frac


def token_bias(fg_weights: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Additive cross-attention logit bias from foreground fractions.

    log(max(w, 1e-6)) for tokens with some foreground, MASKED_LOGIT for pure
    background and padding.  A row with no foreground token falls back to
    unbiased attention over its valid tokens.
    """
    w = np.atleast_2d(np.asarray(fg_weights, dtype=np.float64))
    valid = np.ones_like(w, dtype=bool) if valid is None else np.atleast_2d(valid)
    bias = np.where(w > 0, np.log(np.maximum(w, BIAS_FLOOR)), ops.MASKED_LOGIT)
    bias = np.where(valid, bias, ops.MASKED_LOGIT)
    empty = ~np.any((w > 0) & valid, axis=1)
    if empty.any():
        warnings.warn(f"{int(empty.sum())} prompt(s) without foreground tokens; "
                      "using unbiased attention", RuntimeWarning, stacklevel=2)
        bias[empty] = np.where(valid[empty], 0.0, ops.MASKED_LOGIT)
    return bias


class AdapterSet(Module):
    """One linear map per cross-attention layer: d_enc -> width of that layer."""

    def __init__(self, d_enc: int, widths: list[int], rng: np.random.Generator):
        self.layers = [Linear(d_enc, w, rng, name=f"adapter{i}") for i, w in enumerate(widths)]

    def __len__(self) -> int:
        return len(self.layers)


def adapt(tokens: Tensor, layer_index: int, adapters: AdapterSet) -> Tensor:
    if not 0 <= layer_index < len(adapters):
        raise IndexError(f"adapter index {layer_index} out of range [0, {len(adapters)})")
    return adapters.layers[layer_index](tokens)


def encode_prompts(encoder: PromptEncoder, images: np.ndarray, masks: np.ndarray) -> InstructionTokens:
    """Tokens for a batch of single prompts: images (B, 3, H, W), masks (B, H, W)."""
    tokens = encoder(images)
    weights = foreground_token_weights(masks, encoder.cfg.token_grid)
    return InstructionTokens(tokens, weights, np.ones(weights.shape, dtype=bool))


def combine_instructions(per_prompt: list[InstructionTokens]) -> InstructionTokens:
    """Concatenate the token sequences of k prompts."""
    if not per_prompt:
        raise ValueError("combine_instructions needs at least one prompt")
    if len(per_prompt) == 1:
        return per_prompt[0]
    dims = {p.tokens.shape[2] for p in per_prompt}
    if len(dims) != 1:
        raise ValueError(f"token dims differ: {sorted(dims)}")
    return InstructionTokens(
        ops.concat([p.tokens for p in per_prompt], axis=1),
        np.concatenate([p.fg_weights for p in per_prompt], axis=1),
        np.concatenate([p.valid for p in per_prompt], axis=1),
    )
