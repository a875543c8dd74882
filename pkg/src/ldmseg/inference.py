"""Mask generation: one-step (f), guided multi-step (n), and multi-category video."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import pmcodec
from .conditioning import InstructionTokens, combine_instructions, encode_prompts
from .config import GuidanceConfig
from .denoiser import with_null_instructions
from .numerics import no_grad, ops
from .scheduler import make_timestep_plan, plan_pairs, reverse_step
from .training import TrainState, f_input, predict_noise


@dataclass
class Prediction:
    masks: np.ndarray                      # (B, H, W) bool
    pseudo_masks: np.ndarray               # (B, 3, H, W)
    snapshots: list[np.ndarray] = field(default_factory=list)   # per step, each (B, 3, H, W)


def cfg_combine(e_null, e_q, e_full, g: GuidanceConfig):
    """e_null + gamma_q (e_q - e_null) + gamma_tau (e_full - e_q).

    Evaluated with per-branch weights (1 - gq, gq - gt, gt), which sum to one, so
    gq = gt = 1 gives e_full exactly.
    """
    shapes = {np.shape(e_null), np.shape(e_q), np.shape(e_full)}
    if len(shapes) != 1:
        raise ValueError(f"guidance branches have different shapes: {sorted(shapes)}")
    gq, gt = g.gamma_q, g.gamma_tau
    return (1.0 - gq) * e_null + (gq - gt) * e_q + gt * e_full


def instructions_for(state: TrainState, prompt_sets) -> InstructionTokens:
    """Token sequences for a batch; every item has the same number of prompts k."""
    ks = {len(p) for p in prompt_sets}
    if len(ks) != 1 or 0 in ks:
        raise ValueError("every query needs the same, non-zero number of prompts")
    k = ks.pop()
    enc = state.model.encoder
    per = []
    for j in range(k):
        imgs = np.stack([p[j][0] for p in prompt_sets]).astype(np.float32)
        masks = np.stack([p[j][1] for p in prompt_sets])
        per.append(encode_prompts(enc, imgs, masks))
    return combine_instructions(per)


def _stack_instructions(instr: InstructionTokens, copies: int) -> InstructionTokens:
    return InstructionTokens(ops.concat([instr.tokens] * copies, axis=0),
                             np.concatenate([instr.fg_weights] * copies),
                             np.concatenate([instr.valid] * copies))


def _decode(state: TrainState, z: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pm = state.codec.decode(z)
    return pmcodec.decode(pm, queries, state.cfg.codec_params(), state.cfg.augmented), pm


def _check_variant(state: TrainState, variant: str) -> None:
    if state.cfg.variant != variant:
        raise ValueError(f"checkpoint is variant {state.cfg.variant!r}, not {variant!r}")


def predict_f(state: TrainState, queries: np.ndarray, prompt_sets, seed: int = 0) -> Prediction:
    _check_variant(state, "f")
    queries = np.asarray(queries, dtype=np.float32)
    dtype = state.model.unet.conv_in.w.dtype
    with no_grad():
        z_q = state.codec.encode(queries).astype(dtype)
        eps = np.random.default_rng(seed).standard_normal(z_q.shape).astype(dtype)
        z_in = f_input(z_q, eps, state.cfg, state.sched)
        out = state.model(z_in, np.full(len(queries), state.cfg.t_f), instructions_for(state, prompt_sets))
        masks, pm = _decode(state, out.numpy(), queries)
    return Prediction(masks, pm, [pm])


def _pm_clamp(state: TrainState, dtype):
    """Project a latent estimate onto the box of valid pseudo-mask values."""
    lo, hi = pmcodec.value_range(state.cfg.codec_params(), state.cfg.augmented)
    codec = state.codec
    return lambda x0: codec.encode(np.clip(codec.decode(x0), lo, hi)).astype(dtype)


def predict_n(state: TrainState, queries: np.ndarray, prompt_sets, g: GuidanceConfig | None = None,
              seed: int = 0, snapshots: bool = False, on_step=None) -> Prediction:
    """Three guidance branches per step, evaluated as one batch of 3B.

    ``on_step(t, z_in)`` sees the exact denoiser input, for inspection.
    """
    _check_variant(state, "n")
    g = g or state.cfg.guidance()
    queries = np.asarray(queries, dtype=np.float32)
    dtype = state.model.unet.conv_in.w.dtype
    B = len(queries)
    snaps: list[np.ndarray] = []
    with no_grad():
        z_q = state.codec.encode(queries).astype(dtype)
        instr = instructions_for(state, prompt_sets)
        # branches: (null, null), (query, null), (query, instruction)
        instr3 = with_null_instructions(_stack_instructions(instr, 3),
                                        np.arange(3 * B) < 2 * B, state.model)
        zq3 = np.concatenate([np.zeros_like(z_q), z_q, z_q])
        z = np.random.default_rng(seed).standard_normal(z_q.shape).astype(dtype)
        clamp = _pm_clamp(state, dtype) if state.cfg.clip_x0 else None
        for t, t_prev in plan_pairs(make_timestep_plan(state.sched.T, g.n_steps)):
            z_in = np.concatenate([np.concatenate([z, z, z]), zq3], axis=1)
            if on_step is not None:
                on_step(t, z_in)
            e = predict_noise(state.model, z_in, np.full(3 * B, t), instr3, state.cfg, state.sched).numpy()
            eps = cfg_combine(e[:B], e[B:2 * B], e[2 * B:], g)
            z = reverse_step(z, eps.astype(dtype), t, t_prev, state.sched, clamp)
            if snapshots:
                snaps.append(state.codec.decode(z))
        masks, pm = _decode(state, z, queries)
    return Prediction(masks, pm, snaps)


def predict(state: TrainState, queries, prompt_sets, g: GuidanceConfig | None = None,
            seed: int = 0, snapshots: bool = False) -> Prediction:
    if state.cfg.variant == "f":
        return predict_f(state, queries, prompt_sets, seed)
    return predict_n(state, queries, prompt_sets, g, seed, snapshots)


def infer_f(query: np.ndarray, prompts, state: TrainState, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Binary mask (H, W) and pseudo mask (3, H, W) for one query."""
    p = predict_f(state, np.asarray(query)[None], [list(prompts)], seed)
    return p.masks[0], p.pseudo_masks[0]


def infer_n(query: np.ndarray, prompts, state: TrainState, g: GuidanceConfig | None = None,
            seed: int = 0, snapshots: bool = False):
    """Binary mask, pseudo mask and (optionally) one decoded pseudo mask per step."""
    p = predict_n(state, np.asarray(query)[None], [list(prompts)], g, seed, snapshots)
    return p.masks[0], p.pseudo_masks[0], [s[0] for s in p.snapshots]


def infer_video(frames, first_frame_masks, state: TrainState, g: GuidanceConfig | None = None,
                seed: int = 0) -> list[np.ndarray]:
    """Label maps for every frame; frame 0 with its masks is the prompt for each category."""
    frames = [np.asarray(f, dtype=np.float32) for f in frames]
    masks = [np.asarray(m, dtype=bool) for m in first_frame_masks]
    if not frames:
        raise ValueError("infer_video needs at least one frame")
    if not masks:
        raise ValueError("infer_video needs at least one category mask on the first frame")
    first = np.zeros(frames[0].shape[-2:], dtype=np.int64)
    for c in reversed(range(len(masks))):
        first[masks[c]] = c + 1
    out = [first]
    rest = frames[1:]
    if not rest:
        return out
    C = len(masks)
    queries = np.stack([f for f in rest for _ in range(C)])
    prompts = [[(frames[0], masks[c])] for _ in rest for c in range(C)]
    pm = predict(state, queries, prompts, g, seed).pseudo_masks
    if state.cfg.augmented:
        pm = pmcodec.subtract_image(pm, queries, state.cfg.codec_params())
    for i in range(len(rest)):
        probs = pmcodec.category_probabilities(list(pm[i * C:(i + 1) * C]))
        out.append(pmcodec.assign_labels(probs))
    return out
