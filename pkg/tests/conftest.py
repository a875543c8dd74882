import numpy as np
import pytest

from ldmseg.config import TrainConfig
from ldmseg.data import SegDataset, SyntheticDatasetSpec, generate_dataset

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    _CRITERIA[n] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY = dict(resolution=16, enc_patch=8, base_width=8, groups=4, heads=2, d_enc=16, enc_depth=1,
            enc_heads=2, batch=2, iters=10, log_every=0)


def tiny_cfg(**kw) -> TrainConfig:
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    spec = SyntheticDatasetSpec(resolution=16, categories=("circle", "square"), samples_per_category=6,
                                distractors=(0, 1), radius=(2.5, 4.0), seed=0)
    generate_dataset(spec, out)
    return SegDataset.load(out / "manifest.jsonl")


@pytest.fixture(scope="session")
def tiny_video(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinyvid")
    spec = SyntheticDatasetSpec(resolution=16, categories=("circle", "square"), samples_per_category=2,
                                distractors=(1, 1), radius=(2.5, 3.5), video=True, frames_per_video=3,
                                max_speed=1.0, seed=1)
    generate_dataset(spec, out)
    return SegDataset.load(out / "manifest.jsonl")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
