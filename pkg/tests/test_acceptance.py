"""One test per acceptance criterion; each records a PASS/FAIL line printed at the end of the run.

Trained desk-scale checkpoints are cached under pytest's cache directory, keyed by
config digest, so a rerun only retrains when a config changes.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from ldmseg import pmcodec
from ldmseg.config import GuidanceConfig, TrainConfig
from ldmseg.data import SegDataset, SyntheticDatasetSpec, generate_dataset, make_eval_episodes
from ldmseg.denoiser import LoRAConfig, apply_lora
from ldmseg.evaluation import all_foreground_report, evaluate
from ldmseg.experiments import AblationGrid, directional_checks, run_grid, train_cached
from ldmseg.gradsuite import run_suite
from ldmseg.inference import cfg_combine, infer_n
from ldmseg.metrics import boundary, boundary_f, fb_iou, label_report
from ldmseg.numerics import deterministic
from ldmseg.scheduler import add_noise, make_linear_schedule, make_timestep_plan, plan_pairs, reverse_step
from ldmseg.training import (dropout_masks, init_state, load_checkpoint, save_checkpoint, train)

pytestmark = pytest.mark.acceptance

# desk-scale corpus: 64x64, three shape categories
CORPUS = dict(resolution=64, categories=("circle", "square", "triangle"), distractors=(0, 0),
              radius=(7.0, 12.0))
DESK = TrainConfig(variant="f", resolution=64, base_width=32, lr=1e-3, iters=2000, batch=8, log_every=0)
EVAL_EPISODES, EVAL_SEED = 96, 1234
TIME_LIMIT = 30 * 60


def _check(n, ok, detail):
    record_criterion(n, ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 1-4: algebra and oracles

def test_criterion_01_codec():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    bad = 0
    for _ in range(1000):
        a = rng.uniform(-2, 1)
        p = pmcodec.CodecParams(a, a + rng.uniform(0.01, 2), rng.uniform(1.01, 8))
        h, w = rng.integers(1, 9, 2)
        m = rng.random((h, w)) < rng.random()
        img = rng.uniform(-1, 1, (3, h, w))
        bad += not np.array_equal(pmcodec.decode_vanilla(pmcodec.encode_vanilla(m, p)), m)
        bad += not np.array_equal(pmcodec.decode_augmented(pmcodec.encode_augmented(m, img, p), img, p), m)
    mism = 0
    for p in (pmcodec.CodecParams(), pmcodec.CodecParams(-2.0, 3.0, 2.0)):
        tri = rng.normal(0, 2, (100_000, 3))
        nearest_fg = ((tri - p.fg_code) ** 2).sum(1) < ((tri - p.bg_code) ** 2).sum(1)
        mism += int((pmcodec.decode_vanilla(tri.T.reshape(3, -1, 1))[:, 0] != nearest_fg).sum())
    secs = time.perf_counter() - start
    _check(1, bad == 0 and mism == 0 and secs < 10,
           f"roundtrip failures {bad}/2000, nearest-codeword mismatches {mism}/200000, {secs:.1f}s")


def test_criterion_02_aggregation():
    pm1, pm2 = np.zeros((3, 1, 1)), np.zeros((3, 1, 1))
    pm1[1], pm2[1] = math.log(2), math.log(6)
    probs = pmcodec.category_probabilities([pm1, pm2])[:, 0, 0]
    hand = float(np.abs(probs - [1 / 9, 2 / 9, 6 / 9]).max())
    rng = np.random.default_rng(2)
    worst = 0.0
    for C in range(1, 8):
        s = pmcodec.category_probabilities([rng.normal(0, 20, (3, 16, 16)) for _ in range(C)]).sum(0)
        worst = max(worst, float(np.abs(s - 1).max()))
    _check(2, hand <= 1e-9 and worst <= 1e-6, f"hand case error {hand:.1e}, worst sum deviation {worst:.1e}")


def test_criterion_03_cfg():
    rng = np.random.default_rng(3)
    e = [rng.standard_normal((4, 12, 8, 8)).astype(np.float32) for _ in range(3)]
    exact = np.array_equal(cfg_combine(*e, GuidanceConfig(1.0, 1.0)), e[2])
    scalar = cfg_combine(0.0, 1.0, 2.0, GuidanceConfig(1.5, 7.0))
    _check(3, exact and scalar == 8.5, f"unit scales bit-exact {exact}, scalar case {scalar}")


def test_criterion_04_scheduler():
    s = make_linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(4)
    z0 = rng.standard_normal((2, 12, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    single = max(float(np.abs(reverse_step(add_noise(z0, eps, t, s), eps, t, -1, s) - z0).max())
                 for t in (0, 10, 250, 500))
    z = add_noise(z0, eps, 999, s)
    for t, tp in plan_pairs(make_timestep_plan(1000, 20)):
        z = reverse_step(z, eps, t, tp, s)
    multi = float(np.abs(z - z0).max())
    snr_dec = bool(np.all(np.diff(s.snr()) < 0))
    _check(4, single < 1e-4 and multi < 1e-4 and snr_dec,
           f"single-step err {single:.1e}, 20-step err {multi:.1e}, SNR strictly decreasing {snr_dec}")


# ---------------------------------------------------------------- 5-7: gradients, LoRA, dropout

def test_criterion_05_gradients():
    start = time.perf_counter()
    worst = run_suite(range(20))
    secs = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    _check(5, err < 1e-4 and secs < 120,
           f"{len(worst)} cases x 20 seeds, worst {name} {err:.2e}, {secs:.0f}s")


def _closed_form_lora(cfg: TrainConfig, rank: int) -> int:
    # each transformer has self- and cross-attention, each with q, k, v, o of shape (w, w)
    widths = [cfg.base_width * cfg.mults[i] for i in cfg.attn_levels]
    widths.append(cfg.base_width * cfg.mults[-1])              # middle block
    widths += [cfg.base_width * cfg.mults[i] for i in cfg.attn_levels]
    return sum(2 * 4 * rank * (w + w) for w in widths)


def test_criterion_06_lora(tiny_data, tmp_path):
    from conftest import tiny_cfg
    rng = np.random.default_rng(6)
    base = init_state(tiny_cfg(iters=5))
    train(base, tiny_data)
    save_checkpoint(base, tmp_path / "base.ckpt")

    ep = tiny_data.episode(0, [1], tiny_data.records[0].primary)
    from ldmseg.inference import infer_f
    before = infer_f(ep.query_image, ep.prompts, base)[1]
    apply_lora(base.model, LoRAConfig(rank=4), rng)
    noop = np.array_equal(before, infer_f(ep.query_image, ep.prompts, base)[1])

    cfg = tiny_cfg(lora_rank=4, init_from=str(tmp_path / "base.ckpt"), iters=100)
    st = init_state(cfg)
    frozen = {n: p.data.copy() for n, p in st.model.named_parameters() if not p.trainable}
    train(st, tiny_data)
    identical = all(np.array_equal(p.data, frozen[n]) for n, p in st.model.named_parameters()
                    if n in frozen)
    lora = sum(p.data.size for n, p in st.model.named_parameters() if p.trainable and "lora" in n)
    expected = _closed_form_lora(cfg, 4)
    _check(6, noop and identical and lora == expected and st.step == 100,
           f"zero-init no-op {noop}, base bit-identical after {st.step} steps {identical}, "
           f"LoRA params {lora} vs closed form {expected}")


def test_criterion_07_dropout():
    q, t = dropout_masks(np.random.default_rng(7), 10_000, 0.05)
    _check(7, 0.04 <= q.mean() <= 0.06 and 0.04 <= t.mean() <= 0.06,
           f"null rates query {q.mean():.4f}, instruction {t.mean():.4f}")


# ---------------------------------------------------------------- 8-10: desk-scale training

@pytest.fixture(scope="session")
def cache_root(request) -> Path:
    return Path(request.config.cache.mkdir("ldmseg_acceptance"))


def _corpus(root: Path, name: str, seed: int, n: int, **over) -> SegDataset:
    out = root / name
    if not (out / "manifest.jsonl").exists():
        generate_dataset(SyntheticDatasetSpec(seed=seed, samples_per_category=n, **{**CORPUS, **over}), out)
    return SegDataset.load(out / "manifest.jsonl")


@pytest.fixture(scope="session")
def desk(cache_root):
    train_ds = _corpus(cache_root, "train64", 0, 64)
    test_ds = _corpus(cache_root, "test64", 1, 32)
    episodes = make_eval_episodes(test_ds, EVAL_EPISODES, EVAL_SEED)
    return train_ds, test_ds, episodes


def _train(cache_root, cfg, train_ds):
    run = cache_root / "runs" / cfg.digest()[:16]
    state = train_cached(cfg, train_ds, run)
    secs = float((run / "train_seconds.txt").read_text())
    return state, secs


def test_criterion_08_desk_f(desk, cache_root):
    train_ds, test_ds, episodes = desk
    state, secs = _train(cache_root, DESK, train_ds)
    rep = evaluate(state, test_ds, episodes)
    base = all_foreground_report(test_ds, episodes)
    _check(8, rep.miou >= 0.60 and base.miou <= 0.35 and secs < TIME_LIMIT and state.step == 2000,
           f"mIoU {rep.miou:.3f} (FB-IoU {rep.fb_iou:.3f}), all-foreground {base.miou:.3f}, "
           f"{state.step} steps in {secs / 60:.1f} min")


def test_criterion_09_desk_n(desk, cache_root):
    train_ds, test_ds, episodes = desk
    state, secs = _train(cache_root, DESK.replace(variant="n"), train_ds)
    g = GuidanceConfig(1.5, 7.0, 20)
    rep = evaluate(state, test_ds, episodes, g=g)
    base = all_foreground_report(test_ds, episodes)
    q, ps, c = episodes[0]
    mask, pm, snaps = infer_n(test_ds.images[q], [(test_ds.images[p], test_ds.mask(p, c)) for p in ps[:1]],
                              state, g, snapshots=True)
    final = pmcodec.decode(snaps[-1], test_ds.images[q], state.cfg.codec_params(), state.cfg.augmented)
    dump_ok = len(snaps) == 20 and np.array_equal(final, mask) and np.array_equal(snaps[-1], pm)
    ok = rep.miou >= 0.40 and rep.miou >= base.miou + 0.10 and dump_ok and secs < TIME_LIMIT
    _check(9, ok, f"mIoU {rep.miou:.3f} (FB-IoU {rep.fb_iou:.3f}), all-foreground {base.miou:.3f}, "
                  f"{len(snaps)} snapshots, final decodes to mask {dump_ok}, {secs / 60:.1f} min")


# reduced matched budget for the 9-run ablation: 32x32, 600 steps per run
ABLATION = TrainConfig(resolution=32, base_width=32, lr=1e-3, iters=600, batch=8, log_every=0)


def test_criterion_10_directional(cache_root):
    train_ds = _corpus(cache_root, "train32", 0, 64, resolution=32, radius=(3.5, 6.0))
    test_ds = _corpus(cache_root, "test32", 1, 32, resolution=32, radius=(3.5, 6.0))
    cache = cache_root / "runs"
    out = cache_root / "ablation"
    variant = run_grid(AblationGrid("variant", ("f", "n"), ABLATION, seeds=(0, 1, 2)),
                       train_ds, test_ds, out, cache)
    codec = run_grid(AblationGrid("codec", ("vanilla", "augmented"), ABLATION.replace(variant="n"),
                                  seeds=(0, 1, 2)), train_ds, test_ds, out, cache)
    checks = directional_checks([variant, codec])
    (out / "checks.json").write_text(json.dumps([c.__dict__ for c in checks], indent=1))
    detail = "; ".join(f"{c.name} {c.status} ({c.detail})" for c in checks)
    # a significant reversal fails; within one pooled std is reported as inconclusive
    _check(10, len(checks) == 2 and all(c.status != "fail" for c in checks), detail)


# ---------------------------------------------------------------- 11-12: metrics and persistence

def _brute_f(pred, gt, tol):
    pb, gb = np.argwhere(boundary(pred)), np.argwhere(boundary(gt))
    if len(pb) == 0 and len(gb) == 0:
        return 1.0
    if len(pb) == 0 or len(gb) == 0:
        return 0.0
    d = np.sqrt(((pb[:, None, :] - gb[None, :, :]) ** 2).sum(-1))
    prec, rec = (d.min(1) <= tol).mean(), (d.min(0) <= tol).mean()
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


def test_criterion_11_metrics():
    gt = np.array([[1, 1], [0, 0]])
    pred = np.array([[1, 0], [0, 0]])
    fb = fb_iou([pred], [gt])
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(40):
        n = int(rng.integers(4, 33))
        a, b = rng.random((n, n)) < rng.random(), rng.random((n, n)) < rng.random()
        tol = float(rng.choice([0, 1, 2, 3]))
        worst = max(worst, abs(boundary_f(a, b, tol) - _brute_f(a, b, tol)))
    labs = [rng.integers(0, 4, (16, 16)) for _ in range(4)]
    rep = label_report(labs, labs, 3)
    ones = all(v == 1.0 for v in (rep.miou, rep.fb_iou, rep.fw_iou, rep.J, rep.F, rep.JF))
    _check(11, fb == 7 / 12 and worst == 0.0 and ones,
           f"FB-IoU {fb} (7/12 = {7 / 12}), boundary-F vs brute force max diff {worst}, identical -> 1.0 {ones}")


def test_criterion_12_determinism(tiny_data, tmp_path):
    from conftest import tiny_cfg
    cfg = tiny_cfg(variant="n", iters=10)
    paths = []
    for i in range(2):
        st = init_state(cfg)
        with deterministic():
            train(st, tiny_data)
        paths.append(tmp_path / f"run{i}.ckpt")
        save_checkpoint(st, paths[-1])
    same = paths[0].read_bytes() == paths[1].read_bytes()
    half = init_state(cfg)
    with deterministic():
        train(half, tiny_data, 5)
    save_checkpoint(half, tmp_path / "half.ckpt")
    resumed = load_checkpoint(tmp_path / "half.ckpt")
    with deterministic():
        train(resumed, tiny_data)
    save_checkpoint(resumed, tmp_path / "resumed.ckpt")
    resume_same = (tmp_path / "resumed.ckpt").read_bytes() == paths[0].read_bytes()
    _check(12, same and resume_same, f"repeat bit-identical {same}, resume equals uninterrupted {resume_same}")
