"""Budget-matched ablation grids over the synthetic corpus, and ordinal checks on their results."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import SegDataset, make_eval_episodes
from .evaluation import evaluate
from .numerics import deterministic
from .training import TrainState, init_state, load_checkpoint, save_checkpoint, train

log = logging.getLogger(__name__)

AXES = ("variant", "codec", "optim_space", "lora_rank", "k_instructions")
# fields that define the budget; a grid never varies them
BUDGET_FIELDS = ("iters", "batch", "lr", "resolution", "T")


class GridError(RuntimeError):
    pass


@dataclass
class AblationGrid:
    axis: str
    values: tuple
    base: TrainConfig
    seeds: tuple[int, ...] = (0, 1, 2)
    eval_episodes: int = 96
    eval_seed: int = 1234

    def __post_init__(self):
        if self.axis not in AXES:
            raise GridError(f"axis must be one of {AXES}, got {self.axis!r}")
        if len(self.seeds) < 2:
            raise GridError("each cell needs at least 2 seeds")
        if not self.values:
            raise GridError("grid has no values")
        self.values = tuple(self.values)
        self.seeds = tuple(self.seeds)

    def cell_config(self, value, seed: int) -> TrainConfig:
        if self.axis == "k_instructions":
            return self.base.replace(seed=seed)
        return self.base.replace(**{self.axis: value, "seed": seed})

    def check_budget(self) -> None:
        cfgs = [self.cell_config(v, s) for v in self.values for s in self.seeds]
        for f in BUDGET_FIELDS:
            if len({getattr(c, f) for c in cfgs}) != 1:
                raise GridError(f"cells differ in budget field {f!r}")


@dataclass
class CellResult:
    axis: str
    value: object
    scores: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.scores))

    @property
    def std(self) -> float:
        return float(np.std(self.scores, ddof=1)) if len(self.scores) > 1 else 0.0


@dataclass
class GridTable:
    axis: str
    base: dict
    rows: list[CellResult] = field(default_factory=list)

    def row(self, value) -> CellResult | None:
        return next((r for r in self.rows if r.value == value), None)

    def to_text(self) -> str:
        lines = [f"# axis = {self.axis}", "cell\tmean_miou\tstd\tscores"]
        for r in self.rows:
            scores = ",".join(f"{s:.4f}" for s in r.scores)
            lines.append(f"{self.axis}={r.value}\t{r.mean:.4f}\t{r.std:.4f}\t{scores}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"axis": self.axis, "base": self.base,
                "rows": [{"value": r.value, "scores": r.scores, "mean": r.mean, "std": r.std}
                         for r in self.rows]}


def train_cached(cfg: TrainConfig, dataset: SegDataset, run_dir: Path) -> TrainState:
    """Train ``cfg`` into ``run_dir``, reusing a finished checkpoint with the same config."""
    ckpt = run_dir / "final.ckpt"
    if ckpt.exists():
        try:
            state = load_checkpoint(ckpt)
            if state.cfg.digest() == cfg.digest() and state.step == cfg.iters:
                return state
        except Exception as e:  # stale or corrupt cache entry: retrain
            log.warning("ignoring cached %s: %s", ckpt, e)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.to_text())
    state = init_state(cfg)
    start = time.perf_counter()
    with deterministic():
        train(state, dataset)
    (run_dir / "train_seconds.txt").write_text(f"{time.perf_counter() - start:.1f}\n")
    save_checkpoint(state, ckpt)
    return state


def _cell_name(axis: str, value) -> str:
    return f"{axis}-{value}".replace("/", "_")


def run_grid(grid: AblationGrid, train_data: SegDataset, eval_data: SegDataset,
             out_dir: str | Path, cache_dir: str | Path | None = None) -> GridTable:
    """Train and score every (value, seed) cell; the k axis reuses one checkpoint per seed."""
    grid.check_budget()
    out = Path(out_dir)
    cache = Path(cache_dir) if cache_dir else out / "runs"
    k_max = max(grid.values) if grid.axis == "k_instructions" else 1
    episodes = make_eval_episodes(eval_data, grid.eval_episodes, grid.eval_seed, k_max)
    table = GridTable(grid.axis, grid.base.to_dict())
    scores: dict = {v: [] for v in grid.values}
    for seed in grid.seeds:
        for value in grid.values:
            cfg = grid.cell_config(value, seed)
            cell = _cell_name(grid.axis, value)
            try:
                state = train_cached(cfg, train_data, cache / cfg.digest()[:16])
                k = value if grid.axis == "k_instructions" else 1
                report = evaluate(state, eval_data, [(q, ps[:k], c) for q, ps, c in episodes], k=k)
            except Exception as e:
                raise GridError(f"cell {cell} seed {seed} failed: {e}") from e
            cell_dir = out / cell / f"seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            (cell_dir / "config.txt").write_text(cfg.to_text())
            (cell_dir / "report.txt").write_text(report.to_text())
            (cell_dir / "checkpoint.txt").write_text(str(cache / cfg.digest()[:16] / "final.ckpt") + "\n")
            scores[value].append(report.miou)
            log.info("%s seed %d: miou %.4f", cell, seed, report.miou)
    table.rows = [CellResult(grid.axis, v, scores[v]) for v in grid.values]
    (out / f"table_{grid.axis}.txt").write_text(table.to_text())
    (out / f"table_{grid.axis}.json").write_text(json.dumps(table.to_dict(), indent=1, default=str))
    return table


# ---------------------------------------------------------------- ordinal checks

@dataclass
class Check:
    name: str
    status: str        # "pass" | "inconclusive" | "fail"
    detail: str

    def line(self) -> str:
        return f"{self.status.upper():12s} {self.name}: {self.detail}"


def pooled_std(a: CellResult, b: CellResult) -> float:
    return math.sqrt((a.std ** 2 + b.std ** 2) / 2)


def compare(name: str, hi: CellResult, lo: CellResult) -> Check:
    """hi >= lo: pass beyond one pooled std, fail beyond one pooled std the other way."""
    diff = hi.mean - lo.mean
    band = pooled_std(hi, lo)
    detail = f"{hi.mean:.4f} vs {lo.mean:.4f}, diff {diff:+.4f}, pooled std {band:.4f}"
    if diff > band:
        return Check(name, "pass", detail)
    if diff < -band:
        return Check(name, "fail", detail)
    return Check(name, "inconclusive", detail)


def monotone_within_band(name: str, rows: list[CellResult], width: float = 2.0) -> Check:
    """Non-decreasing means, allowing each step to drop by at most width * std."""
    rows = sorted(rows, key=lambda r: r.value)
    worst = 0.0
    for a, b in zip(rows, rows[1:]):
        band = width * max(a.std, b.std)
        worst = max(worst, (a.mean - b.mean) - band)
    means = ", ".join(f"{r.value}:{r.mean:.4f}" for r in rows)
    return Check(name, "pass" if worst <= 0 else "fail", means)


def directional_checks(tables) -> list[Check]:
    """Ordinal relations found in the given tables; failures are reported, never raised."""
    if isinstance(tables, GridTable):
        tables = [tables]
    out: list[Check] = []
    for t in tables:
        if t.axis == "variant" and t.row("f") and t.row("n"):
            out.append(compare("f >= n", t.row("f"), t.row("n")))
        elif t.axis == "codec" and t.row("augmented") and t.row("vanilla"):
            tag = " (variant n)" if t.base.get("variant") == "n" else f" (variant {t.base.get('variant')})"
            out.append(compare("augmented >= vanilla" + tag, t.row("augmented"), t.row("vanilla")))
        elif t.axis == "k_instructions" and len(t.rows) > 1:
            out.append(monotone_within_band("mIoU non-decreasing in k", t.rows))
    return out
