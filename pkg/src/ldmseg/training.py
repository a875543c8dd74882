"""Losses, condition dropout, the AdamW loop and checkpoints for both variants."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pmcodec
from .conditioning import PromptEncoder, encode_prompts
from .config import ConfigError, TrainConfig
from .data import Episode, SegDataset, sample_episode
from .denoiser import SegModel, apply_lora, with_null_instructions
from .latentcodec import LatentCodec
from .numerics import Tensor, backward, no_grad, ops
from .scheduler import NoiseSchedule, add_noise, make_linear_schedule, skip_coefficients, truncated_snr_weight

log = logging.getLogger(__name__)

CKPT_MAGIC = b"LDMSEGCK"
CKPT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------- losses

def loss_f_pixel(pm_target, z_pred: Tensor, codec: LatentCodec) -> Tensor:
    """MSE between the pseudo mask and the decoded prediction; gradients flow through decode."""
    return ops.mse(codec.decode_tensor(z_pred), np.asarray(pm_target, dtype=z_pred.dtype))


def loss_f_latent(z_pm, z_pred: Tensor) -> Tensor:
    return ops.mse(z_pred, np.asarray(z_pm, dtype=z_pred.dtype))


def loss_n(eps_true, eps_pred: Tensor, weights=None) -> Tensor:
    """Noise MSE; optional ``weights`` scale each item's squared error."""
    eps_true = np.asarray(eps_true, dtype=eps_pred.dtype)
    if weights is None:
        return ops.mse(eps_pred, eps_true)
    w = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (eps_pred.ndim - 1))
    w = np.broadcast_to(w / eps_pred.numpy().size, eps_pred.shape).astype(eps_pred.dtype)
    d = eps_pred - Tensor(eps_true)
    return ops.sum_all(d * d * Tensor(w))


def predict_noise(model: SegModel, z_in, t, instructions, cfg: TrainConfig, sched: NoiseSchedule) -> Tensor:
    """Multi-step denoiser output as a noise estimate.

    With ``eps_param = skip`` the network output is a residual on top of the best linear
    guess from the noisy channels, so the identity part of the target is not learned.
    """
    out = model(z_in, t, instructions)
    if cfg.eps_param == "plain":
        return out
    z_t = np.asarray(z_in.numpy() if isinstance(z_in, Tensor) else z_in)[:, :cfg.c_z]
    ab = sched.alpha_bar[np.broadcast_to(np.asarray(t), (len(z_t),))].reshape(-1, 1, 1, 1)
    c_skip, c_out = skip_coefficients(ab, cfg.sigma_data)
    dtype = out.dtype
    return out * Tensor(np.broadcast_to(c_out, out.shape).astype(dtype)) + Tensor((c_skip * z_t).astype(dtype))


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamW:
    lr: float
    weight_decay: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Linear decay to zero over ``total_steps``; ``step`` is 0-based."""
        return self.lr * max(0.0, 1.0 - step / self.total_steps)

    def step(self, named_params, step: int) -> None:
        lr = self.lr_at(step)
        t = step + 1
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in named_params:
            if not p.trainable:
                continue
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data * (1.0 - lr * self.weight_decay) - lr * upd
            p.assign(new)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    cfg: TrainConfig
    model: SegModel
    opt: AdamW
    sched: NoiseSchedule
    codec: LatentCodec
    rng: np.random.Generator
    step: int = 0
    losses: list[float] = field(default_factory=list)


def build_model(cfg: TrainConfig, load_init: bool = True) -> SegModel:
    rng = np.random.default_rng(cfg.seed)
    encoder = PromptEncoder(cfg.encoder(), rng)
    model = SegModel(cfg.unet(), encoder, rng)
    if cfg.init_from and load_init:
        base = load_checkpoint(cfg.init_from)
        if base.cfg.unet() != cfg.unet() or base.cfg.encoder() != cfg.encoder():
            raise ConfigError(f"init_from {cfg.init_from} has a different architecture")
        if base.model.lora is not None:
            raise ConfigError("init_from must point to a checkpoint trained without LoRA")
        model.load_state_dict(base.model.state_dict())
    if cfg.lora().enabled:
        apply_lora(model, cfg.lora(), np.random.default_rng([cfg.seed, 7]))
    return model


def init_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    return TrainState(
        cfg=cfg, model=model,
        opt=AdamW(cfg.lr, cfg.weight_decay, cfg.iters),
        sched=make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
        codec=LatentCodec(cfg.f_sp),
        rng=np.random.default_rng([cfg.seed, 1]),
    )


# ---------------------------------------------------------------- one step

def dropout_masks(rng: np.random.Generator, n: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    """Independent null decisions for the query latent and for the instruction."""
    return rng.random(n) < p, rng.random(n) < p


def _flip(rng, image, mask, p):
    if p > 0 and rng.random() < p:
        return image[..., ::-1].copy(), mask[..., ::-1].copy()
    return image, mask


def assemble(episodes: list[Episode], rng: np.random.Generator, flip_p: float):
    """Stack a batch (first prompt of each episode), with independent horizontal flips."""
    qi, qm, pi, pm = [], [], [], []
    for ep in episodes:
        a, b = _flip(rng, ep.query_image, ep.query_mask, flip_p)
        c, d = _flip(rng, *ep.prompts[0], flip_p)
        qi.append(a), qm.append(b), pi.append(c), pm.append(d)
    return np.stack(qi), np.stack(qm), np.stack(pi), np.stack(pm)


def f_input(z_q: np.ndarray, eps: np.ndarray, cfg: TrainConfig, sched: NoiseSchedule) -> np.ndarray:
    """Input of the one-step variant: scheduled noising at t_f, or z_q + sqrt(1 - ab) eps."""
    if cfg.f_noise == "schedule":
        return add_noise(z_q, eps, cfg.t_f, sched)
    return (z_q + np.sqrt(1.0 - sched.alpha_bar[cfg.t_f]) * eps).astype(z_q.dtype)


def batch_loss(batch: list[Episode], state: TrainState, rng: np.random.Generator) -> Tensor:
    """Training objective on one batch; flips, dropout, noise and timesteps all come from ``rng``."""
    cfg, model, codec = state.cfg, state.model, state.codec
    dtype = model.unet.conv_in.w.dtype
    if model.cfg.c_in != (cfg.c_z if cfg.variant == "f" else 2 * cfg.c_z):
        raise ConfigError("model input channels do not match the configured variant")
    q_img, q_mask, p_img, p_mask = assemble(batch, rng, cfg.flip_p)
    n = len(batch)
    params = cfg.codec_params()
    z_q = codec.encode(q_img).astype(dtype)
    pm = pmcodec.encode(q_mask, q_img, params, cfg.augmented).astype(dtype)
    drop_q, drop_tau = dropout_masks(rng, n, cfg.p_drop)
    z_q = np.where(drop_q[:, None, None, None], 0.0, z_q).astype(dtype)

    instr = encode_prompts(model.encoder, p_img, p_mask)
    instr = with_null_instructions(instr, drop_tau, model)

    eps = rng.standard_normal(z_q.shape).astype(dtype)
    if cfg.variant == "f":
        t = np.full(n, cfg.t_f)
        out = model(f_input(z_q, eps, cfg, state.sched), t, instr)
        if cfg.optim_space == "pixel":
            return loss_f_pixel(pm, out, codec)
        return loss_f_latent(codec.encode(pm), out)
    t = rng.integers(0, cfg.T, size=n)
    z_noisy = add_noise(codec.encode(pm).astype(dtype), eps, t, state.sched)
    z_in = np.concatenate([z_noisy, z_q], axis=1).astype(dtype)
    out = predict_noise(model, z_in, t, instr, cfg, state.sched)
    w = truncated_snr_weight(state.sched.alpha_bar[t]) if cfg.loss_weight == "truncated_snr" else None
    return loss_n(eps, out, w)


def heldout_loss(batches: list[list[Episode]], state: TrainState, seed: int = 0) -> float:
    """Mean objective over fixed batches with fixed randomness; comparable across training steps."""
    rng = np.random.default_rng(seed)
    with no_grad():
        return float(np.mean([batch_loss(b, state, rng).item() for b in batches]))


def train_step(batch: list[Episode], state: TrainState) -> float:
    model = state.model
    loss = batch_loss(batch, state, state.rng)

    model.zero_grad()
    backward(loss)
    state.opt.step(model.named_parameters(), state.step)
    state.step += 1
    value = loss.item()
    state.losses.append(value)
    return value


def train(state: TrainState, dataset: SegDataset, iters: int | None = None,
          ckpt_dir: str | Path | None = None, callback=None) -> TrainState:
    """Run until ``state.step`` reaches ``iters`` (default: the configured total)."""
    cfg = state.cfg
    target = cfg.iters if iters is None else iters
    while state.step < target:
        batch = [sample_episode(dataset, state.rng) for _ in range(cfg.batch)]
        loss = train_step(batch, state)
        if cfg.log_every and state.step % cfg.log_every == 0:
            recent = state.losses[-cfg.log_every:]
            log.info("step %d loss %.5f (avg %.5f)", state.step, loss, float(np.mean(recent)))
        if ckpt_dir and cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
            save_checkpoint(state, Path(ckpt_dir) / f"step{state.step:06d}.ckpt")
        if callback is not None:
            callback(state)
    return state


# ---------------------------------------------------------------- checkpoints

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _pack_array(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    code = _CODES.get(np.dtype(dt).newbyteorder("<") if dt.kind != "u" else dt)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _json_array(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    """Self-describing container: header, named little-endian arrays, sha256 trailer."""
    body = io.BytesIO()
    arrays: list[tuple[str, np.ndarray]] = [
        ("config", _json_array(state.cfg.to_dict())),
        ("meta", _json_array({"step": state.step, "rng": state.rng.bit_generator.state,
                              "losses": state.losses, "lora": state.model.lora is not None})),
        ("sched/beta", state.sched.beta),
        ("sched/alpha", state.sched.alpha),
        ("sched/alpha_bar", state.sched.alpha_bar),
        ("codec/mix", state.codec.mix),
    ]
    for name, p in state.model.named_parameters():
        arrays.append((f"param/{name}", p.data))
    for name in sorted(state.opt.m):
        arrays.append((f"adam_m/{name}", state.opt.m[name]))
        arrays.append((f"adam_v/{name}", state.opt.v[name]))
    body.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        _pack_array(body, name, arr)
    header = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + bytes.fromhex(state.cfg.digest())
    payload = header + body.getvalue()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload + hashlib.sha256(payload).digest())
    tmp.replace(path)


def _read_arrays(data: bytes) -> dict[str, np.ndarray]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(nbytes)), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    head = len(CKPT_MAGIC) + 4 + 32
    if len(data) < head + 32 or not data.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = struct.unpack("<I", data[len(CKPT_MAGIC):len(CKPT_MAGIC) + 4])
    if version != CKPT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CKPT_VERSION})")
    payload, checksum = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointError(f"checksum mismatch in {path}: file is corrupt")
    digest = payload[len(CKPT_MAGIC) + 4:head].hex()
    arrays = _read_arrays(payload[head:])
    cfg = TrainConfig.from_dict(json.loads(arrays["config"].tobytes()))
    if cfg.digest() != digest:
        raise CheckpointError("config digest does not match the stored config")
    meta = json.loads(arrays["meta"].tobytes())

    model = build_model(cfg, load_init=False)
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(params)
    sched = NoiseSchedule(arrays["sched/beta"], arrays["sched/alpha"], arrays["sched/alpha_bar"])
    opt = AdamW(cfg.lr, cfg.weight_decay, cfg.iters)
    for k, v in arrays.items():
        if k.startswith("adam_m/"):
            opt.m[k[7:]] = v
        elif k.startswith("adam_v/"):
            opt.v[k[7:]] = v
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(cfg, model, opt, sched, LatentCodec(cfg.f_sp, arrays["codec/mix"]), rng,
                      int(meta["step"]), list(meta["losses"]))
