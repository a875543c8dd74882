import json

import pytest

from conftest import tiny_cfg
from ldmseg.experiments import (AblationGrid, CellResult, GridError, GridTable, compare, directional_checks,
                                monotone_within_band, pooled_std, run_grid)


def _grid(axis, values, **kw):
    return AblationGrid(axis, values, tiny_cfg(iters=3), seeds=(0, 1), eval_episodes=4, **kw)


def test_single_cell_grid(tiny_data, tmp_path):
    table = run_grid(_grid("variant", ("f",)), tiny_data, tiny_data, tmp_path)
    assert len(table.rows) == 1 and len(table.rows[0].scores) == 2
    assert (tmp_path / "table_variant.txt").read_text().count("variant=f") == 1
    saved = json.loads((tmp_path / "table_variant.json").read_text())
    assert saved["rows"][0]["scores"] == table.rows[0].scores
    for seed in (0, 1):
        cell = tmp_path / "variant-f" / f"seed{seed}"
        assert (cell / "report.txt").exists()
        ckpt = (cell / "checkpoint.txt").read_text().strip()
        assert ckpt.endswith("final.ckpt") and (tmp_path / "runs").exists()


def test_k_axis_reuses_one_checkpoint_per_seed(tiny_data, tmp_path):
    table = run_grid(_grid("k_instructions", (1, 2, 3)), tiny_data, tiny_data, tmp_path)
    assert [r.value for r in table.rows] == [1, 2, 3]
    assert len(list((tmp_path / "runs").iterdir())) == 2
    pointers = {(tmp_path / f"k_instructions-{k}" / "seed0" / "checkpoint.txt").read_text() for k in (1, 2, 3)}
    assert len(pointers) == 1


def test_rerun_reuses_cache_and_scores_match(tiny_data, tmp_path):
    g = _grid("codec", ("vanilla", "augmented"))
    a = run_grid(g, tiny_data, tiny_data, tmp_path / "a", cache_dir=tmp_path / "cache")
    stamp = {p: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("final.ckpt")}
    b = run_grid(g, tiny_data, tiny_data, tmp_path / "b", cache_dir=tmp_path / "cache")
    assert [r.scores for r in a.rows] == [r.scores for r in b.rows]
    assert stamp == {p: p.stat().st_mtime_ns for p in (tmp_path / "cache").rglob("final.ckpt")}
    c = run_grid(g, tiny_data, tiny_data, tmp_path / "c")
    assert [r.scores for r in a.rows] == [r.scores for r in c.rows]


def test_grid_validation():
    with pytest.raises(GridError, match="seeds"):
        AblationGrid("variant", ("f", "n"), tiny_cfg(), seeds=(0,))
    with pytest.raises(GridError, match="axis"):
        AblationGrid("colour", ("red",), tiny_cfg())
    with pytest.raises(GridError):
        AblationGrid("variant", (), tiny_cfg())


def test_budget_mismatch_refused(tiny_data, tmp_path):
    g = _grid("variant", ("f", "n"))
    g.cell_config = lambda value, seed: tiny_cfg(variant=value, seed=seed, iters=3 if value == "f" else 4)
    with pytest.raises(GridError, match="iters"):
        run_grid(g, tiny_data, tiny_data, tmp_path)


def test_failing_cell_named(tiny_data, tmp_path):
    g = _grid("lora_rank", (0, 2), )
    g.base = g.base.replace(init_from=str(tmp_path / "missing.ckpt"))
    with pytest.raises(GridError, match="lora_rank-0 seed 0"):
        run_grid(g, tiny_data, tiny_data, tmp_path)


def _cell(value, scores):
    return CellResult("variant", value, list(scores))


def test_band_arithmetic():
    hi = _cell("f", [0.60, 0.61, 0.62])
    lo = _cell("n", [0.54, 0.55, 0.56])
    assert pooled_std(hi, lo) == pytest.approx(0.01)
    assert compare("f >= n", hi, lo).status == "pass"
    assert compare("n >= f", lo, hi).status == "fail"
    close = _cell("n", [0.595, 0.605, 0.615])
    assert compare("f >= n", hi, close).status == "inconclusive"


def test_directional_checks_report_every_relation():
    v = GridTable("variant", {"variant": "f"}, [_cell("f", [0.5, 0.52, 0.51]), _cell("n", [0.6, 0.61, 0.62])])
    c = GridTable("codec", {"variant": "n"}, [CellResult("codec", "vanilla", [0.3, 0.31, 0.32]),
                                               CellResult("codec", "augmented", [0.4, 0.41, 0.42])])
    k = GridTable("k_instructions", {}, [CellResult("k_instructions", i, [m, m + 0.01])
                                         for i, m in ((1, 0.5), (2, 0.52), (3, 0.51))])
    checks = directional_checks([v, c, k])
    assert [ch.status for ch in checks] == ["fail", "pass", "pass"]
    assert "(variant n)" in checks[1].name
    assert checks[0].line().startswith("FAIL")


def test_monotone_band():
    rows = [CellResult("k_instructions", k, s) for k, s in ((1, [0.5, 0.52]), (2, [0.3, 0.32]))]
    assert monotone_within_band("k", rows).status == "fail"
