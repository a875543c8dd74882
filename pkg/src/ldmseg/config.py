"""Flat key = value run configuration.

One line per key, ``#`` starts a comment, unknown keys are errors.  Every field
of :class:`TrainConfig` is a valid key; tuples are written comma-separated.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .conditioning import PromptEncoderConfig
from .denoiser import LoRAConfig, UNetConfig
from .pmcodec import CodecParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceConfig:
    gamma_q: float = 1.5
    gamma_tau: float = 7.0
    n_steps: int = 20

    def __post_init__(self):
        if self.n_steps < 1:
            raise ConfigError("n_steps must be >= 1")
        if not all(map(_finite, (self.gamma_q, self.gamma_tau))):
            raise ConfigError("guidance scales must be finite")


def _finite(v: float) -> bool:
    return v == v and abs(v) != float("inf")


@dataclass(frozen=True)
class TrainConfig:
    # meta-architecture
    variant: str = "f"
    optim_space: str = "pixel"
    codec: str = "augmented"
    pm_a: float = -0.6
    pm_b: float = 0.6
    pm_alpha: float = 4.0
    # optimisation
    iters: int = 2000
    batch: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-2
    p_drop: float = 0.05
    t_f: int = 0
    f_noise: str = "schedule"
    eps_param: str = "skip"
    sigma_data: float = 0.33
    loss_weight: str = "truncated_snr"
    lora_rank: int = 0
    lora_scale: float = 1.0
    lora_targets: tuple[str, ...] = ("q", "k", "v", "o")
    init_from: str = ""
    flip_p: float = 0.5
    seed: int = 0
    # noise schedule
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # geometry and model size
    resolution: int = 64
    f_sp: int = 2
    base_width: int = 64
    mults: tuple[int, ...] = (1, 2)
    attn_levels: tuple[int, ...] = (1,)
    heads: int = 4
    groups: int = 8
    d_enc: int = 128
    enc_patch: int = 8
    enc_depth: int = 2
    enc_heads: int = 4
    # inference
    gamma_q: float = 1.5
    gamma_tau: float = 7.0
    n_steps: int = 20
    clip_x0: bool = True
    # bookkeeping
    log_every: int = 50
    ckpt_every: int = 0

    def __post_init__(self):
        if self.variant not in ("f", "n"):
            raise ConfigError(f"variant must be 'f' or 'n', got {self.variant!r}")
        if self.optim_space not in ("pixel", "latent"):
            raise ConfigError(f"optim_space must be 'pixel' or 'latent', got {self.optim_space!r}")
        if self.codec not in ("vanilla", "augmented"):
            raise ConfigError(f"codec must be 'vanilla' or 'augmented', got {self.codec!r}")
        if self.f_noise not in ("schedule", "additive"):
            raise ConfigError(f"f_noise must be 'schedule' or 'additive', got {self.f_noise!r}")
        if self.eps_param not in ("skip", "plain"):
            raise ConfigError(f"eps_param must be 'skip' or 'plain', got {self.eps_param!r}")
        if self.loss_weight not in ("truncated_snr", "none"):
            raise ConfigError(f"loss_weight must be 'truncated_snr' or 'none', got {self.loss_weight!r}")
        if not (_finite(self.sigma_data) and self.sigma_data > 0):
            raise ConfigError(f"sigma_data must be > 0, got {self.sigma_data}")
        if not 0 <= self.p_drop < 1:
            raise ConfigError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.iters < 1 or self.batch < 1:
            raise ConfigError("iters and batch must be >= 1")
        if not 0 <= self.t_f < self.T:
            raise ConfigError(f"t_f must be in [0, {self.T})")
        if self.resolution % self.f_sp or self.resolution % self.enc_patch:
            raise ConfigError("resolution must be divisible by f_sp and enc_patch")
        down = 2 ** (len(self.mults) - 1)
        if (self.resolution // self.f_sp) % down:
            raise ConfigError("latent size must be divisible by the U-Net downsampling factor")
        # validate the derived configs eagerly
        self.codec_params(), self.unet(), self.encoder(), self.lora(), self.guidance()

    # -- derived configs
    @property
    def c_z(self) -> int:
        return 3 * self.f_sp ** 2

    @property
    def augmented(self) -> bool:
        return self.codec == "augmented"

    def codec_params(self) -> CodecParams:
        try:
            return CodecParams(self.pm_a, self.pm_b, self.pm_alpha)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def unet(self) -> UNetConfig:
        c_in = self.c_z if self.variant == "f" else 2 * self.c_z
        try:
            return UNetConfig(c_z=self.c_z, c_in=c_in, base_width=self.base_width, mults=self.mults,
                              attn_levels=self.attn_levels, heads=self.heads, d_enc=self.d_enc,
                              groups=self.groups)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def encoder(self) -> PromptEncoderConfig:
        return PromptEncoderConfig(self.resolution, self.enc_patch, self.d_enc, self.enc_depth,
                                   self.enc_heads)

    def lora(self) -> LoRAConfig:
        try:
            return LoRAConfig(self.lora_rank, self.lora_scale, self.lora_targets)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.gamma_q, self.gamma_tau, self.n_steps)

    # -- serialisation
    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        kwargs = {k: _coerce(known[k], v) for k, v in d.items()}
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return cls.from_dict(parse_flat(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(f: dataclasses.Field, v):
    if not isinstance(v, str):
        return tuple(v) if isinstance(v, list) else v
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    try:
        if kind == "bool":
            if v.strip().lower() not in ("true", "false", "1", "0"):
                raise ValueError
            return v.strip().lower() in ("true", "1")
        if kind == "int":
            return int(v)
        if kind == "float":
            return float(v)
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in v.split(",") if x.strip())
        if kind.startswith("tuple[str"):
            return tuple(x.strip() for x in v.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {v!r}") from None
    return v
