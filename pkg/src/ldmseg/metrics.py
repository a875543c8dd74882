"""Segmentation metrics: confusion-matrix IoUs and DAVIS-style J&F."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage


def _pairs(preds, gts):
    preds = [np.asarray(p) for p in preds]
    gts = [np.asarray(g) for g in gts]
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions vs {len(gts)} ground truths")
    for p, g in zip(preds, gts):
        if p.shape != g.shape:
            raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    return preds, gts


def confusion(preds, gts, n_classes: int) -> np.ndarray:
    """Summed confusion matrix, rows = ground truth, columns = prediction."""
    preds, gts = _pairs(preds, gts)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(preds, gts):
        idx = g.astype(np.int64).ravel() * n_classes + p.astype(np.int64).ravel()
        cm += np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
    return cm


def class_iou(cm: np.ndarray) -> np.ndarray:
    """IoU per class; NaN where the class appears in neither prediction nor ground truth."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def _mean_iou(cm: np.ndarray, classes) -> float:
    """Mean IoU over the listed classes that occur, in exact rational arithmetic (rounded once)."""
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    terms = [Fraction(int(cm[c, c]), int(union[c])) for c in classes if union[c] > 0]
    return float(sum(terms) / len(terms)) if terms else 1.0


def miou(preds, gts, C: int) -> float:
    """Mean IoU over foreground classes 1..C (background excluded)."""
    if C < 1:
        raise ValueError("C must be >= 1")
    return _mean_iou(confusion(preds, gts, C + 1), range(1, C + 1))


def fb_iou(preds, gts) -> float:
    """Mean of background and foreground IoU on binarised maps."""
    preds, gts = _pairs(preds, gts)
    return _mean_iou(confusion([p > 0 for p in preds], [g > 0 for g in gts], 2), (0, 1))


def fw_iou(preds, gts, n_classes: int | None = None) -> float:
    """Frequency-weighted IoU over all classes including background."""
    preds, gts = _pairs(preds, gts)
    if n_classes is None:
        n_classes = int(max(max(p.max() for p in preds), max(g.max() for g in gts))) + 1
    cm = confusion(preds, gts, n_classes)
    freq = cm.sum(1) / cm.sum()
    iou = np.nan_to_num(class_iou(cm))
    return float((freq * iou).sum())


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour outside the mask (image border counts as outside)."""
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1),
                                   border_value=0)
    return m & ~inner


def boundary_tolerance(shape: tuple[int, int], frac: float = 0.008) -> int:
    """DAVIS convention: ceil(frac * image diagonal) pixels."""
    return int(math.ceil(frac * math.hypot(*shape)))


def _within(src: np.ndarray, dst: np.ndarray, tol: float) -> np.ndarray:
    """For each src boundary pixel: is some dst boundary pixel within Euclidean distance tol?"""
    if not dst.any():
        return np.zeros(int(src.sum()), dtype=bool)
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src] <= tol


def boundary_f(pred: np.ndarray, gt: np.ndarray, tol: float | None = None) -> float:
    pb, gb = boundary(pred), boundary(gt)
    if tol is None:
        tol = boundary_tolerance(np.shape(gt))
    n_p, n_g = int(pb.sum()), int(gb.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = _within(pb, gb, tol).mean()
    recall = _within(gb, pb, tol).mean()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def region_j(pred: np.ndarray, gt: np.ndarray) -> float:
    p, g = np.asarray(pred, bool), np.asarray(gt, bool)
    union = (p | g).sum()
    return 1.0 if union == 0 else float((p & g).sum() / union)


def j_and_f(pred_masks, gt_masks, boundary_tol: float | None = None) -> tuple[float, float, float]:
    preds, gts = _pairs(pred_masks, gt_masks)
    if not preds:
        raise ValueError("j_and_f needs at least one frame")
    J = float(np.mean([region_j(p, g) for p, g in zip(preds, gts)]))
    F = float(np.mean([boundary_f(p, g, boundary_tol) for p, g in zip(preds, gts)]))
    return J, F, (J + F) / 2


@dataclass
class EvalReport:
    per_category_iou: dict[int, float] = field(default_factory=dict)
    miou: float = 0.0
    fb_iou: float = 0.0
    fw_iou: float = 0.0
    J: float = 0.0
    F: float = 0.0
    JF: float = 0.0
    episodes: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_category_iou"] = {str(k): v for k, v in self.per_category_iou.items()}
        return d

    def to_text(self) -> str:
        lines = [f"episodes = {self.episodes}", f"miou = {self.miou:.6f}",
                 f"fb_iou = {self.fb_iou:.6f}", f"fw_iou = {self.fw_iou:.6f}",
                 f"J = {self.J:.6f}", f"F = {self.F:.6f}", f"JF = {self.JF:.6f}"]
        lines += [f"iou.{k} = {v:.6f}" for k, v in sorted(self.per_category_iou.items())]
        return "\n".join(lines) + "\n"


def episode_report(pred_masks, gt_masks, categories, n_categories: int) -> EvalReport:
    """Aggregate binary episode predictions; each episode's mask is labelled with its category."""
    preds = [np.where(np.asarray(p, bool), c, 0) for p, c in zip(pred_masks, categories)]
    gts = [np.where(np.asarray(g, bool), c, 0) for g, c in zip(gt_masks, categories)]
    return label_report(preds, gts, n_categories, episodes=len(preds))


def label_report(preds, gts, n_categories: int, episodes: int | None = None) -> EvalReport:
    preds, gts = _pairs(preds, gts)
    cm = confusion(preds, gts, n_categories + 1)
    iou = class_iou(cm)
    per = {c: float(iou[c]) for c in range(1, n_categories + 1) if np.isfinite(iou[c])}
    J, F, JF = j_and_f([p > 0 for p in preds], [g > 0 for g in gts])
    return EvalReport(per, miou(preds, gts, n_categories), fb_iou(preds, gts),
                      fw_iou(preds, gts, n_categories + 1), J, F, JF,
                      len(preds) if episodes is None else episodes)
