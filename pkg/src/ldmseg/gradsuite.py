"""Finite-difference checks for every kernel and for a tiny end-to-end denoiser."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .conditioning import PromptEncoder, PromptEncoderConfig, encode_prompts
from .denoiser import LoRAConfig, SegModel, UNetConfig, apply_lora
from .latentcodec import LatentCodec
from .numerics import Parameter, Tensor, grad_check, ops
from .training import loss_f_pixel

Case = tuple[Callable[[], Tensor], list[Parameter]]


def _p(rng, *shape, name="x", scale=1.0) -> Parameter:
    return Parameter(rng.standard_normal(shape) * scale, name=name)


def _weighted(out_fn, shape, rng):
    """Scalar loss sum(R * out) with R fixed once, so every output element matters."""
    R = Tensor(rng.standard_normal(shape))
    return lambda: ops.sum_all(ops.mul(out_fn(), R))


def kernel_cases(rng: np.random.Generator) -> dict[str, Case]:
    cases: dict[str, Case] = {}

    def add(name, out_fn, out_shape, params):
        cases[name] = (_weighted(out_fn, out_shape, rng), params)

    a, b = _p(rng, 3, 4, name="a"), _p(rng, 3, 4, name="b")
    add("add", lambda: ops.add(a, b), (3, 4), [a, b])
    add("sub", lambda: ops.sub(a, b), (3, 4), [a, b])
    add("mul", lambda: ops.mul(a, b), (3, 4), [a, b])
    add("shift", lambda: ops.shift(a, 0.3), (3, 4), [a])
    add("scale", lambda: ops.scale(a, -1.7), (3, 4), [a])
    add("silu", lambda: ops.silu(a), (3, 4), [a])
    add("gelu", lambda: ops.gelu(a), (3, 4), [a])
    cond = rng.random((3, 4)) < 0.5
    add("where", lambda: ops.where(cond, a, b), (3, 4), [a, b])
    cases["sum_all"] = (lambda: ops.sum_all(ops.mul(a, a)), [a])
    cases["mean_all"] = (lambda: ops.mean_all(ops.mul(a, b)), [a, b])
    tgt = rng.standard_normal((3, 4))
    cases["mse"] = (lambda: ops.mse(a, tgt), [a])
    add("reshape", lambda: ops.reshape(a, (2, 6)), (2, 6), [a])
    c3 = _p(rng, 2, 3, 4, name="c3")
    add("transpose", lambda: ops.transpose(c3, (2, 0, 1)), (4, 2, 3), [c3])
    add("concat", lambda: ops.concat([a, b], axis=1), (3, 8), [a, b])
    row = _p(rng, 1, 4, name="row")
    add("expand", lambda: ops.expand(row, (3, 4)), (3, 4), [row])
    m1, m2 = _p(rng, 2, 3, 4, name="m1"), _p(rng, 4, 5, name="m2")
    m3 = _p(rng, 2, 4, 5, name="m3")
    add("matmul", lambda: ops.matmul(m1, m3), (2, 3, 5), [m1, m3])
    lb = _p(rng, 5, name="lb")
    add("linear", lambda: ops.linear(m1, m2, lb), (2, 3, 5), [m1, m2, lb])
    x = _p(rng, 2, 3, 6, 6, name="img")
    cb = _p(rng, 2, 3, name="cb")
    add("channel_bias", lambda: ops.channel_bias(x, cb), (2, 3, 6, 6), [x, cb])
    w3, bb = _p(rng, 4, 3, 3, 3, name="w3", scale=0.3), _p(rng, 4, name="bc")
    add("conv2d", lambda: ops.conv2d(x, w3, bb), (2, 4, 6, 6), [x, w3, bb])
    add("conv2d_stride2", lambda: ops.conv2d(x, w3, bb, stride=2), (2, 4, 3, 3), [x, w3, bb])
    w1 = _p(rng, 4, 3, 1, 1, name="w1")
    add("conv2d_1x1", lambda: ops.conv2d(x, w1, bb), (2, 4, 6, 6), [x, w1, bb])
    add("upsample2x", lambda: ops.upsample2x(x), (2, 3, 12, 12), [x])
    xg = _p(rng, 2, 4, 3, 3, name="xg")
    gam, bet = _p(rng, 4, name="gamma"), _p(rng, 4, name="beta")
    add("group_norm", lambda: ops.group_norm(xg, gam, bet, 2), (2, 4, 3, 3), [xg, gam, bet])
    add("layer_norm", lambda: ops.layer_norm(m1, gam, bet), (2, 3, 4), [m1, gam, bet])
    add("softmax", lambda: ops.softmax(m1, axis=-1), (2, 3, 4), [m1])
    q, k, v = _p(rng, 2, 3, 4, name="q"), _p(rng, 2, 5, 4, name="k"), _p(rng, 2, 5, 4, name="v")
    bias = np.where(rng.random((2, 5)) < 0.3, ops.MASKED_LOGIT, np.log(rng.uniform(0.1, 1, (2, 5))))
    bias[:, 0] = 0.0
    add("attention", lambda: ops.attention(q, k, v, 2), (2, 3, 4), [q, k, v])
    add("attention_bias", lambda: ops.attention(q, k, v, 2, bias), (2, 3, 4), [q, k, v])
    tw = _p(rng, 8, 3, name="tw")
    t = rng.integers(0, 1000, size=4)
    add("timestep_embedding", lambda: ops.linear(ops.timestep_embedding(t, 8, np.float64), tw),
        (4, 3), [tw])
    return cases


def tiny_model_case(rng: np.random.Generator, lora: bool = False) -> Case:
    """Pixel loss of a small f64 denoiser fed by the prompt encoder."""
    enc_cfg = PromptEncoderConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
    ucfg = UNetConfig(c_z=12, c_in=12, base_width=8, mults=(1, 2), attn_levels=(1,), heads=2,
                      d_enc=16, groups=4)
    model = SegModel(ucfg, PromptEncoder(enc_cfg, rng), rng)
    if lora:
        apply_lora(model, LoRAConfig(rank=2), rng)
        for p in model.parameters():
            if p.name.endswith("lora_b"):
                p.assign(rng.standard_normal(p.data.shape) * 0.1)
    model.astype(np.float64)
    codec = LatentCodec(2)
    z = rng.standard_normal((2, 12, 8, 8))
    t = rng.integers(0, 1000, size=2)
    images = rng.uniform(-1, 1, (2, 3, 16, 16))
    masks = np.zeros((2, 16, 16), bool)
    masks[:, 4:12, 3:13] = True
    target = rng.standard_normal((2, 3, 16, 16))

    def fn():
        instr = encode_prompts(model.encoder, images, masks)
        return loss_f_pixel(target, model(Tensor(z), t, instr), codec)

    return fn, model.trainable_parameters()


def run_suite(seeds=range(20), max_coords: int = 16, model_coords: int = 2,
              include_model: bool = True) -> dict[str, float]:
    """Worst relative error per case over all seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, params) in kernel_cases(rng).items():
            err = grad_check(fn, params, max_coords=max_coords, rng=rng)
            worst[name] = max(worst.get(name, 0.0), err)
        if include_model:
            for name, lora in (("tiny_denoiser", False), ("tiny_denoiser_lora", True)):
                fn, params = tiny_model_case(rng, lora)
                # loss O(1) with some gradients ~1e-8: 1e-5 steps alone drown those in roundoff
                err = grad_check(fn, params, max_coords=model_coords, rng=rng, refine_step=1e-3)
                worst[name] = max(worst.get(name, 0.0), err)
    return worst
