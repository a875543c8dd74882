"""Conditional U-Net over latents with mask-biased cross-attention and LoRA."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import AdapterSet, InstructionTokens, adapt
from .layers import Attention, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear
from .numerics import Module, Parameter, Tensor, ops


@dataclass(frozen=True)
class UNetConfig:
    c_z: int = 12
    c_in: int = 12
    base_width: int = 64
    mults: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (1,)
    heads: int = 4
    d_enc: int = 128
    groups: int = 8

    def __post_init__(self):
        if self.c_in not in (self.c_z, 2 * self.c_z):
            raise ValueError(f"c_in must be c_z ({self.c_z}) or 2*c_z, got {self.c_in}")
        if not self.attn_levels:
            raise ValueError("at least one attention level is required")
        if any(not 0 <= i < len(self.mults) for i in self.attn_levels):
            raise ValueError(f"attention levels {self.attn_levels} outside {len(self.mults)} levels")

    @property
    def c_out(self) -> int:
        return self.c_z

    @property
    def t_dim(self) -> int:
        return 4 * self.base_width

    def widths(self) -> list[int]:
        return [self.base_width * m for m in self.mults]

    def cross_attention_widths(self) -> list[int]:
        """Width of every cross-attention layer, in forward order (down, mid, up)."""
        w = self.widths()
        down = [w[i] for i in range(len(w)) if i in self.attn_levels]
        up = [w[i] for i in reversed(range(len(w))) if i in self.attn_levels]
        return down + [w[-1]] + up


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 4
    scale: float = 1.0
    targets: tuple[str, ...] = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.rank < 0:
            raise ValueError("LoRA rank must be >= 0")
        unknown = set(self.targets) - set(Attention.PROJECTIONS)
        if unknown:
            raise ValueError(f"unknown LoRA target(s): {sorted(unknown)}")

    @property
    def enabled(self) -> bool:
        return self.rank > 0


class ResBlock(Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int, rng, name: str):
        self.norm1 = GroupNorm(c_in, groups, f"{name}.norm1")
        self.conv1 = Conv2d(c_in, c_out, rng, name=f"{name}.conv1")
        self.temb = Linear(t_dim, c_out, rng, name=f"{name}.temb")
        self.norm2 = GroupNorm(c_out, groups, f"{name}.norm2")
        self.conv2 = Conv2d(c_out, c_out, rng, name=f"{name}.conv2")
        self.skip = Conv2d(c_in, c_out, rng, k=1, name=f"{name}.skip") if c_in != c_out else None

    def __call__(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(ops.silu(self.norm1(x)))
        h = ops.channel_bias(h, self.temb(ops.silu(temb)))
        h = self.conv2(ops.silu(self.norm2(h)))
        return ops.add(h, x if self.skip is None else self.skip(x))


class SpatialTransformer(Module):
    """Self-attention, cross-attention over instruction tokens, feed-forward."""

    def __init__(self, ch: int, heads: int, groups: int, rng, name: str):
        self.norm = GroupNorm(ch, groups, f"{name}.norm")
        self.proj_in = Linear(ch, ch, rng, name=f"{name}.proj_in")
        self.ln1 = LayerNorm(ch, f"{name}.ln1")
        self.self_attn = Attention(ch, heads, rng, name=f"{name}.self_attn")
        self.ln2 = LayerNorm(ch, f"{name}.ln2")
        self.cross_attn = Attention(ch, heads, rng, name=f"{name}.cross_attn")
        self.ln3 = LayerNorm(ch, f"{name}.ln3")
        self.ff = FeedForward(ch, 2 * ch, rng, name=f"{name}.ff")
        self.proj_out = Linear(ch, ch, rng, name=f"{name}.proj_out")

    def __call__(self, x: Tensor, context: Tensor, bias: np.ndarray) -> Tensor:
        n, c, h, w = x.shape
        tok = ops.transpose(ops.reshape(self.norm(x), (n, c, h * w)), (0, 2, 1))
        tok = self.proj_in(tok)
        tok = ops.add(tok, self.self_attn(self.ln1(tok)))
        tok = ops.add(tok, self.cross_attn(self.ln2(tok), context, bias))
        tok = ops.add(tok, self.ff(self.ln3(tok)))
        tok = self.proj_out(tok)
        out = ops.reshape(ops.transpose(tok, (0, 2, 1)), (n, c, h, w))
        return ops.add(x, out)


class UNet(Module):
    def __init__(self, cfg: UNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        w = cfg.widths()
        g = cfg.groups
        self.t_fc1 = Linear(cfg.base_width, cfg.t_dim, rng, name="t_fc1")
        self.t_fc2 = Linear(cfg.t_dim, cfg.t_dim, rng, name="t_fc2")
        self.conv_in = Conv2d(cfg.c_in, w[0], rng, name="conv_in")
        self.down_res, self.down_attn, self.downsample = [], [], []
        ch = w[0]
        for i, wi in enumerate(w):
            self.down_res.append(ResBlock(ch, wi, cfg.t_dim, g, rng, f"down{i}.res"))
            ch = wi
            self.down_attn.append(SpatialTransformer(wi, cfg.heads, g, rng, f"down{i}.attn")
                                  if i in cfg.attn_levels else None)
            if i < len(w) - 1:
                self.downsample.append(Conv2d(wi, wi, rng, stride=2, name=f"down{i}.ds"))
        self.mid_res = ResBlock(ch, ch, cfg.t_dim, g, rng, "mid.res")
        self.mid_attn = SpatialTransformer(ch, cfg.heads, g, rng, "mid.attn")
        self.up_res, self.up_attn, self.upconv = [], [], []
        for i in reversed(range(len(w))):
            if i < len(w) - 1:
                self.upconv.append(Conv2d(ch, w[i], rng, name=f"up{i}.us"))
                ch = w[i]
            self.up_res.append(ResBlock(ch + w[i], w[i], cfg.t_dim, g, rng, f"up{i}.res"))
            ch = w[i]
            self.up_attn.append(SpatialTransformer(w[i], cfg.heads, g, rng, f"up{i}.attn")
                                if i in cfg.attn_levels else None)
        self.norm_out = GroupNorm(ch, g, "norm_out")
        self.conv_out = Conv2d(ch, cfg.c_out, rng, name="conv_out")

    def transformers(self) -> list[SpatialTransformer]:
        down = [m for m in self.down_attn if m is not None]
        up = [m for m in self.up_attn if m is not None]
        return down + [self.mid_attn] + up

    def attention_layers(self) -> list[Attention]:
        out = []
        for tr in self.transformers():
            out += [tr.self_attn, tr.cross_attn]
        return out

    def __call__(self, z: Tensor, t: np.ndarray, contexts: list[Tensor], bias: np.ndarray) -> Tensor:
        cfg = self.cfg
        if z.ndim != 4 or z.shape[1] != cfg.c_in:
            raise ValueError(f"denoiser expects (N, {cfg.c_in}, h, w) input, got {z.shape}")
        n = z.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        temb = ops.timestep_embedding(t, cfg.base_width, dtype=z.dtype)
        temb = self.t_fc2(ops.silu(self.t_fc1(temb)))
        ctx = iter(contexts)
        x = self.conv_in(z)
        skips = []
        for i, res in enumerate(self.down_res):
            x = res(x, temb)
            if self.down_attn[i] is not None:
                x = self.down_attn[i](x, next(ctx), bias)
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        x = self.mid_res(x, temb)
        x = self.mid_attn(x, next(ctx), bias)
        ups = iter(self.upconv)
        last = len(self.down_res) - 1
        for j, res in enumerate(self.up_res):
            i = last - j
            if i < last:
                x = next(ups)(ops.upsample2x(x))
            x = res(ops.concat([x, skips[i]], axis=1), temb)
            if self.up_attn[j] is not None:
                x = self.up_attn[j](x, next(ctx), bias)
        return self.conv_out(ops.silu(self.norm_out(x)))


class SegModel(Module):
    """Denoiser, instruction adapters, learned null instruction token, and the prompt encoder."""

    def __init__(self, unet_cfg: UNetConfig, encoder, rng: np.random.Generator):
        self.unet = UNet(unet_cfg, rng)
        self.adapters = AdapterSet(unet_cfg.d_enc, unet_cfg.cross_attention_widths(), rng)
        self.null_token = Parameter((rng.standard_normal((1, unet_cfg.d_enc)) * 0.02).astype(np.float32),
                                    name="null_token")
        self.encoder = encoder
        if encoder is not None and encoder.cfg.embed_dim != unet_cfg.d_enc:
            raise ValueError(f"encoder dim {encoder.cfg.embed_dim} != d_enc {unet_cfg.d_enc}")
        self.lora: LoRAConfig | None = None

    @property
    def cfg(self) -> UNetConfig:
        return self.unet.cfg

    def forward(self, z_in: Tensor | np.ndarray, t, instructions: InstructionTokens) -> Tensor:
        if not isinstance(z_in, Tensor):
            z_in = Tensor(np.asarray(z_in, dtype=self.unet.conv_in.w.dtype))
        tokens = instructions.tokens
        contexts = [adapt(tokens, i, self.adapters) for i in range(len(self.adapters))]
        return self.unet(z_in, t, contexts, instructions.logit_bias())

    __call__ = forward


def null_condition(kind: str, model: SegModel | None = None, like: np.ndarray | None = None):
    """Null query (zero latent shaped like ``like``) or null instruction (one learned token)."""
    if kind == "query":
        if like is None:
            raise ValueError("query null needs a reference latent")
        return np.zeros_like(like)
    if kind == "instruction":
        if model is None:
            raise ValueError("instruction null needs the model")
        return model.null_token
    raise ValueError(f"unknown null kind {kind!r}")


def with_null_instructions(instr: InstructionTokens, drop: np.ndarray, model: SegModel) -> InstructionTokens:
    """Replace rows where ``drop`` is true by the single null token (other slots masked out)."""
    drop = np.asarray(drop, dtype=bool)
    if not drop.any():
        return instr
    b, L, d = instr.tokens.shape
    null_row = ops.concat([model.null_token, Tensor(np.zeros((L - 1, d), instr.tokens.dtype))], axis=0) \
        if L > 1 else model.null_token
    null_full = ops.expand(ops.reshape(null_row, (1, L, d)), (b, L, d))
    tokens = ops.where(drop[:, None, None], null_full, instr.tokens)
    weights = instr.fg_weights.copy()
    valid = instr.valid.copy()
    weights[drop] = 0.0
    weights[drop, 0] = 1.0
    valid[drop] = False
    valid[drop, 0] = True
    return InstructionTokens(tokens, weights, valid)


def null_instructions(model: SegModel, batch: int) -> InstructionTokens:
    d = model.cfg.d_enc
    tokens = ops.expand(ops.reshape(model.null_token, (1, 1, d)), (batch, 1, d))
    return InstructionTokens(tokens, np.ones((batch, 1)), np.ones((batch, 1), dtype=bool))


def apply_lora(model: SegModel, cfg: LoRAConfig, rng: np.random.Generator) -> SegModel:
    """Freeze every base parameter and attach LoRA factors to targeted U-Net projections.

    Adapters and the null token stay trainable: they have no pretrained value.
    """
    if not cfg.enabled:
        raise ValueError("apply_lora needs rank >= 1")
    model.freeze()
    for attn in model.unet.attention_layers():
        for name in cfg.targets:
            getattr(attn, name).add_lora(cfg.rank, cfg.scale, rng)
    for p in model.adapters.parameters():
        p.set_trainable(True)
    model.null_token.set_trainable(True)
    model.lora = cfg
    return model


def lora_parameter_count(unet_cfg: UNetConfig, cfg: LoRAConfig) -> int:
    """Closed form: sum over targeted projections of r * (d_in + d_out)."""
    total = 0
    for ch in unet_cfg.cross_attention_widths():
        # self-attention and cross-attention of one transformer; adapters make kv_dim == ch
        total += 2 * len(cfg.targets) * cfg.rank * (ch + ch)
    return total


def adapter_parameter_count(unet_cfg: UNetConfig) -> int:
    return sum(unet_cfg.d_enc * w + w for w in unet_cfg.cross_attention_widths())
