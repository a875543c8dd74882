"""Pseudo-mask encoding of binary masks and decoding of predictions.

Masks are boolean arrays (..., H, W); pseudo masks are real arrays (..., 3, H, W).
A foreground pixel maps to the codeword (a, b, (a+b)/2), a background pixel to
(b, a, (a+b)/2).  The augmented form adds the image scaled by 1/alpha.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import softmax


@dataclass(frozen=True)
class CodecParams:
    a: float = -0.6
    b: float = 0.6
    alpha: float = 4.0

    def __post_init__(self):
        vals = (self.a, self.b, self.alpha)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"codec params must be finite: {vals}")
        if not self.a < self.b:
            raise ValueError(f"codec params need a < b, got a={self.a}, b={self.b}")
        if not self.alpha > 1:
            raise ValueError(f"codec params need alpha > 1, got {self.alpha}")

    @property
    def fg_code(self) -> np.ndarray:
        return np.array([self.a, self.b, (self.a + self.b) / 2])

    @property
    def bg_code(self) -> np.ndarray:
        return np.array([self.b, self.a, (self.a + self.b) / 2])


def _check_image(pm_shape, image: np.ndarray) -> None:
    if image.shape != pm_shape:
        raise ValueError(f"image shape {image.shape} does not match pseudo mask {pm_shape}")


def encode_vanilla(mask: np.ndarray, params: CodecParams = CodecParams()) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    a, b = params.a, params.b
    out = np.empty(mask.shape[:-2] + (3,) + mask.shape[-2:], dtype=np.float64)
    out[..., 0, :, :] = np.where(mask, a, b)
    out[..., 1, :, :] = np.where(mask, b, a)
    out[..., 2, :, :] = (a + b) / 2
    return out


def decode_vanilla(pred: np.ndarray) -> np.ndarray:
    pred = np.asarray(pred)
    # ties go to background
    return pred[..., 1, :, :] > pred[..., 0, :, :]


def encode_augmented(mask: np.ndarray, image: np.ndarray,
                     params: CodecParams = CodecParams()) -> np.ndarray:
    pm = encode_vanilla(mask, params)
    _check_image(pm.shape, np.asarray(image))
    return pm + np.asarray(image, dtype=np.float64) / params.alpha


def subtract_image(pred: np.ndarray, image: np.ndarray, params: CodecParams) -> np.ndarray:
    """PM minus image/alpha: the image-free residual of an augmented prediction."""
    pred = np.asarray(pred)
    _check_image(pred.shape, np.asarray(image))
    return pred - np.asarray(image) / params.alpha


def decode_augmented(pred: np.ndarray, image: np.ndarray,
                     params: CodecParams = CodecParams()) -> np.ndarray:
    return decode_vanilla(subtract_image(pred, image, params))


def encode(mask, image, params: CodecParams, augmented: bool) -> np.ndarray:
    return encode_augmented(mask, image, params) if augmented else encode_vanilla(mask, params)


def decode(pred, image, params: CodecParams, augmented: bool) -> np.ndarray:
    return decode_augmented(pred, image, params) if augmented else decode_vanilla(pred)


def value_range(params: CodecParams, augmented: bool) -> tuple[float, float]:
    """Bounds of every encoded channel value, for images in [-1, 1]."""
    pad = 1.0 / params.alpha if augmented else 0.0
    return params.a - pad, params.b + pad


def category_probabilities(per_category_pms, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Per-pixel probabilities over {background, 1..C} from C pseudo masks.

    p_c is proportional to exp(PM_c[1] - PM_c[0]) with the background term fixed
    at exp(0); computed as a softmax over [0, gap_1, ..., gap_C].  ``shape``
    gives H, W when the list is empty.
    """
    pms = [np.asarray(p, dtype=np.float64) for p in per_category_pms]
    if not pms:
        if shape is None:
            raise ValueError("shape is required when no pseudo masks are given")
        return np.ones((1,) + tuple(shape))
    hw = pms[0].shape[-2:]
    for p in pms:
        if p.ndim != 3 or p.shape[0] < 2 or p.shape[-2:] != hw:
            raise ValueError(f"pseudo mask shape {p.shape} inconsistent with {hw}")
    if shape is not None and tuple(shape) != hw:
        raise ValueError(f"shape {shape} does not match pseudo masks {hw}")
    gaps = np.stack([np.zeros(hw)] + [p[1] - p[0] for p in pms])
    return softmax(gaps, axis=0)


def assign_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax over channels; np.argmax already picks the lowest index on ties."""
    return np.argmax(probs, axis=0).astype(np.int64)
