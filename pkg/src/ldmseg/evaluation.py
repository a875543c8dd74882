"""Held-out episode evaluation and the all-foreground reference."""
from __future__ import annotations

import numpy as np

from .config import GuidanceConfig
from .data import SegDataset, make_eval_episodes
from .inference import predict
from .metrics import EvalReport, episode_report
from .training import TrainState

EpisodeList = list[tuple[int, list[int], int]]


def episode_masks(dataset: SegDataset, episodes: EpisodeList) -> list[np.ndarray]:
    return [dataset.mask(q, c) for q, _, c in episodes]


def predict_episodes(state: TrainState, dataset: SegDataset, episodes: EpisodeList, k: int = 1,
                     g: GuidanceConfig | None = None, batch: int = 16, seed: int = 0) -> list[np.ndarray]:
    """Binary predictions using the first ``k`` prompts of every episode."""
    preds: list[np.ndarray] = []
    for start in range(0, len(episodes), batch):
        chunk = episodes[start:start + batch]
        queries = np.stack([dataset.images[q] for q, _, _ in chunk])
        prompts = [[(dataset.images[p], dataset.mask(p, c)) for p in ps[:k]] for _, ps, c in chunk]
        preds.extend(predict(state, queries, prompts, g, seed=seed + start).masks)
    return preds


def evaluate(state: TrainState, dataset: SegDataset, episodes: EpisodeList | None = None,
             n_episodes: int = 96, k: int = 1, g: GuidanceConfig | None = None,
             seed: int = 1234) -> EvalReport:
    if episodes is None:
        episodes = make_eval_episodes(dataset, n_episodes, seed, k)
    preds = predict_episodes(state, dataset, episodes, k, g)
    return episode_report(preds, episode_masks(dataset, episodes), [c for _, _, c in episodes],
                          dataset.num_categories)


def all_foreground_report(dataset: SegDataset, episodes: EpisodeList) -> EvalReport:
    """Score of predicting every pixel as foreground."""
    gts = episode_masks(dataset, episodes)
    preds = [np.ones_like(g, dtype=bool) for g in gts]
    return episode_report(preds, gts, [c for _, _, c in episodes], dataset.num_categories)
