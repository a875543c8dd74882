"""Lossless image <-> latent transform standing in for a frozen VAE.

encode: space-to-depth (each f x f x 3 block becomes one 3*f*f vector, ordered
channel-major then row then column) followed by an orthonormal channel mix.
decode is the exact inverse and never clamps.
"""
from __future__ import annotations

import numpy as np

from .numerics import Tensor, ops


def random_orthonormal(n: int, seed: int) -> np.ndarray:
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class LatentCodec:
    def __init__(self, f_sp: int = 2, mix: np.ndarray | None = None):
        if f_sp < 1:
            raise ValueError("spatial factor must be >= 1")
        self.f_sp = f_sp
        self.c_z = 3 * f_sp * f_sp
        if mix is None:
            mix = np.eye(self.c_z)
        mix = np.asarray(mix, dtype=np.float64)
        if mix.shape != (self.c_z, self.c_z):
            raise ValueError(f"mix must be {self.c_z}x{self.c_z}, got {mix.shape}")
        if not np.allclose(mix @ mix.T, np.eye(self.c_z), atol=1e-10):
            raise ValueError("channel mix must be orthonormal")
        self.mix = mix
        self.identity_mix = bool(np.array_equal(mix, np.eye(self.c_z)))

    def latent_shape(self, h: int, w: int) -> tuple[int, int, int]:
        self._check_hw(h, w)
        return self.c_z, h // self.f_sp, w // self.f_sp

    def _check_hw(self, h: int, w: int) -> None:
        if h % self.f_sp or w % self.f_sp:
            raise ValueError(f"image size {h}x{w} not divisible by spatial factor {self.f_sp}")

    def _mix(self, z: np.ndarray, m: np.ndarray) -> np.ndarray:
        if self.identity_mix:
            return z
        # channel axis is -3
        return np.einsum("ij,...jhw->...ihw", m.astype(z.dtype), z)

    def encode(self, image: np.ndarray) -> np.ndarray:
        x = np.asarray(image)
        if x.ndim < 3 or x.shape[-3] != 3:
            raise ValueError(f"expected (..., 3, H, W) image, got {x.shape}")
        h, w = x.shape[-2:]
        self._check_hw(h, w)
        f = self.f_sp
        lead = x.shape[:-3]
        blocks = x.reshape(lead + (3, h // f, f, w // f, f))
        nd = len(lead)
        perm = tuple(range(nd)) + tuple(nd + i for i in (0, 2, 4, 1, 3))
        z = blocks.transpose(perm).reshape(lead + (self.c_z, h // f, w // f))
        return self._mix(z, self.mix)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        z = np.asarray(latent)
        if z.ndim < 3 or z.shape[-3] != self.c_z:
            raise ValueError(f"expected (..., {self.c_z}, h, w) latent, got {z.shape}")
        z = self._mix(z, self.mix.T)
        f = self.f_sp
        lead = z.shape[:-3]
        hh, ww = z.shape[-2:]
        nd = len(lead)
        blocks = z.reshape(lead + (3, f, f, hh, ww))
        perm = tuple(range(nd)) + tuple(nd + i for i in (0, 3, 1, 4, 2))
        return blocks.transpose(perm).reshape(lead + (3, hh * f, ww * f))

    def decode_tensor(self, latent: Tensor) -> Tensor:
        """Differentiable decode of a batched latent (N, c_z, h, w)."""
        n, c, hh, ww = latent.shape
        if c != self.c_z:
            raise ValueError(f"expected {self.c_z} latent channels, got {c}")
        z = latent
        if not self.identity_mix:
            zt = ops.transpose(z, (0, 2, 3, 1))
            z = ops.transpose(ops.linear(zt, Tensor(self.mix.astype(z.dtype))), (0, 3, 1, 2))
        f = self.f_sp
        z = ops.reshape(z, (n, 3, f, f, hh, ww))
        z = ops.transpose(z, (0, 1, 4, 2, 5, 3))
        return ops.reshape(z, (n, 3, hh * f, ww * f))
