import numpy as np
import pytest
from scipy import stats

from conftest import tiny_cfg
from ldmseg.config import ConfigError
from ldmseg.data import sample_episode
from ldmseg.latentcodec import LatentCodec, random_orthonormal
from ldmseg.numerics import Parameter, Tensor, backward, deterministic, ops
from ldmseg.training import (AdamW, CheckpointError, dropout_masks, heldout_loss, init_state, load_checkpoint,
                             loss_f_latent, loss_f_pixel, loss_n, predict_noise, save_checkpoint, train,
                             train_step)
from ldmseg.denoiser import null_instructions
from ldmseg.scheduler import skip_coefficients


def test_pixel_loss_fixed_points():
    codec = LatentCodec(2)
    rng = np.random.default_rng(0)
    pm = rng.uniform(-1, 1, (2, 3, 8, 8))
    assert loss_f_pixel(pm, Tensor(codec.encode(pm)), codec).item() == 0.0
    ones = Tensor(codec.encode(np.ones((2, 3, 8, 8))))
    assert loss_f_pixel(np.zeros((2, 3, 8, 8)), ones, codec).item() == 1.0


def test_losses_match_scalar_oracle():
    rng = np.random.default_rng(1)
    codec = LatentCodec(2, random_orthonormal(12, 4))
    a, b = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((2, 12, 4, 4))
    assert loss_f_pixel(a, Tensor(b), codec).item() == pytest.approx(
        np.mean((a - codec.decode(b)) ** 2), abs=1e-6)
    c = rng.standard_normal((2, 12, 4, 4))
    assert loss_f_latent(c, Tensor(b)).item() == pytest.approx(np.mean((c - b) ** 2), abs=1e-6)
    assert loss_n(c, Tensor(b)).item() == pytest.approx(np.mean((c - b) ** 2), abs=1e-6)
    assert loss_n(c, Tensor(c)).item() == 0.0
    assert loss_f_latent(c, Tensor(c)).item() == 0.0


def test_latent_and_pixel_losses_agree_under_isometry():
    rng = np.random.default_rng(2)
    codec = LatentCodec(2, random_orthonormal(12, 1))
    pm = rng.uniform(-1, 1, (1, 3, 16, 16))
    z = Tensor(rng.standard_normal((1, 12, 8, 8)))
    assert loss_f_latent(codec.encode(pm), z).item() == pytest.approx(
        loss_f_pixel(pm, z, codec).item(), abs=1e-5)


def test_noise_loss_monte_carlo():
    eps = np.random.default_rng(3).standard_normal(10_000)
    assert abs(loss_n(eps, Tensor(np.zeros_like(eps))).item() - 1.0) < 0.05


def test_weighted_noise_loss():
    rng = np.random.default_rng(5)
    c, b = rng.standard_normal((2, 3, 12, 4, 4))
    assert loss_n(c, Tensor(b), np.ones(3)).item() == pytest.approx(loss_n(c, Tensor(b)).item(), rel=1e-6)
    w = np.array([0.5, 2.0, 7.0])
    want = np.mean(w[:, None, None, None] * (c - b) ** 2)
    assert loss_n(c, Tensor(b), w).item() == pytest.approx(want, rel=1e-6)


def test_skip_parameterisation_zero_output_is_linear_guess():
    cfg = tiny_cfg(variant="n")
    state = init_state(cfg)
    for p in state.model.unet.conv_out.parameters():
        p.data = np.zeros_like(p.data)
    rng = np.random.default_rng(6)
    z_in = rng.standard_normal((2, 2 * cfg.c_z, 4, 4)).astype(np.float32)
    t = np.array([10, 900])
    instr = null_instructions(state.model, 2)
    out = predict_noise(state.model, z_in, t, instr, cfg, state.sched).numpy()
    c_skip, _ = skip_coefficients(state.sched.alpha_bar[t], cfg.sigma_data)
    np.testing.assert_allclose(out, c_skip[:, None, None, None] * z_in[:, :cfg.c_z], rtol=1e-6)
    plain = predict_noise(state.model, z_in, t, instr, cfg.replace(eps_param="plain"), state.sched).numpy()
    assert not plain.any()


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_n(np.zeros(3), Tensor(np.zeros(4)))
    with pytest.raises(ValueError):
        loss_f_pixel(np.zeros((1, 3, 8, 8)), Tensor(np.zeros((1, 12, 2, 2))), LatentCodec(2))


def test_dropout_rates_and_independence():
    rng = np.random.default_rng(4)
    q, t = dropout_masks(rng, 10_000, 0.05)
    assert 0.04 <= q.mean() <= 0.06 and 0.04 <= t.mean() <= 0.06
    q, t = dropout_masks(rng, 200_000, 0.05)
    # joint null rate approx p^2, 4 sigma band
    sigma = np.sqrt(0.0025 * (1 - 0.0025) / 200_000)
    assert abs((q & t).mean() - 0.0025) < 4 * sigma
    q, t = dropout_masks(rng, 1000, 0.0)
    assert not q.any() and not t.any()


def test_dropout_always_with_p_one():
    q, t = dropout_masks(np.random.default_rng(0), 1000, 1.0)
    assert q.all() and t.all()


def test_adamw_first_step():
    p = Parameter(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.1])
    opt = AdamW(lr=0.1, weight_decay=0.01, total_steps=10)
    opt.step([("p", p)], 0)
    # first step: m_hat/sqrt(v_hat) = sign(g)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.1]) * (1 - 1e-7)
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)
    assert opt.lr_at(0) == 0.1 and opt.lr_at(5) == pytest.approx(0.05) and opt.lr_at(10) == 0.0


def test_frozen_parameters_untouched():
    p = Parameter(np.ones(2), trainable=False)
    AdamW(0.1, 0.1, 5).step([("p", p)], 0)
    np.testing.assert_array_equal(p.data, 1.0)


def _run(cfg, data, steps):
    st = init_state(cfg)
    with deterministic():
        train(st, data, steps)
    return st


@pytest.mark.parametrize("variant", ["f", "n"])
def test_identical_seeds_bit_identical(variant, tiny_data, tmp_path):
    cfg = tiny_cfg(variant=variant)
    a, b = _run(cfg, tiny_data, 3), _run(cfg, tiny_data, 3)
    for (n1, p1), (_, p2) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert np.array_equal(p1.data, p2.data), n1
    save_checkpoint(a, tmp_path / "a.ckpt")
    save_checkpoint(b, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_roundtrip(tiny_data, tmp_path):
    st = _run(tiny_cfg(variant="n", optim_space="latent"), tiny_data, 2)
    save_checkpoint(st, tmp_path / "s.ckpt")
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.cfg == st.cfg and back.step == 2 and back.losses == st.losses
    for (n, p), (_, q) in zip(st.model.named_parameters(), back.model.named_parameters()):
        assert np.array_equal(p.data, q.data) and p.trainable == q.trainable, n
    for k in st.opt.m:
        assert np.array_equal(st.opt.m[k], back.opt.m[k]) and np.array_equal(st.opt.v[k], back.opt.v[k])
    assert np.array_equal(st.sched.alpha_bar, back.sched.alpha_bar)
    assert st.rng.bit_generator.state == back.rng.bit_generator.state
    ep = sample_episode(tiny_data, np.random.default_rng(0))
    from ldmseg.inference import predict
    a = predict(st, ep.query_image[None], [ep.prompts], seed=3, snapshots=True)
    b = predict(back, ep.query_image[None], [ep.prompts], seed=3, snapshots=True)
    assert np.array_equal(a.pseudo_masks, b.pseudo_masks)


def test_resume_equals_uninterrupted(tiny_data, tmp_path):
    cfg = tiny_cfg(variant="f", lora_rank=0)
    full = _run(cfg, tiny_data, 10)
    half = _run(cfg, tiny_data, 5)
    save_checkpoint(half, tmp_path / "h.ckpt")
    resumed = load_checkpoint(tmp_path / "h.ckpt")
    with deterministic():
        train(resumed, tiny_data, 10)
    assert resumed.losses == full.losses
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert np.array_equal(p.data, q.data), n


def test_checkpoint_version_and_corruption(tiny_data, tmp_path):
    st = _run(tiny_cfg(), tiny_data, 1)
    path = tmp_path / "c.ckpt"
    save_checkpoint(st, path)
    raw = bytearray(path.read_bytes())
    bad = raw.copy()
    bad[8] ^= 0xFF
    (tmp_path / "v.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.ckpt")
    bad = raw.copy()
    bad[len(bad) // 2] ^= 0x01
    (tmp_path / "x.ckpt").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path / "x.ckpt")
    (tmp_path / "t.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_lora_keeps_base_bit_identical(tiny_data, tmp_path):
    base = _run(tiny_cfg(), tiny_data, 2)
    save_checkpoint(base, tmp_path / "base.ckpt")
    cfg = tiny_cfg(lora_rank=2, init_from=str(tmp_path / "base.ckpt"), iters=20)
    st = init_state(cfg)
    frozen = {n: p.data.copy() for n, p in st.model.named_parameters() if not p.trainable}
    assert frozen
    for n, p in base.model.named_parameters():
        if n in frozen:
            assert np.array_equal(frozen[n], p.data)
    with deterministic():
        train(st, tiny_data)
    for n, p in st.model.named_parameters():
        if n in frozen:
            assert np.array_equal(p.data, frozen[n]), n
    assert any(not np.array_equal(p.data, 0) for n, p in st.model.named_parameters() if "lora_b" in n)
    # resaved LoRA checkpoint reloads without the base file
    save_checkpoint(st, tmp_path / "lora.ckpt")
    (tmp_path / "base.ckpt").unlink()
    back = load_checkpoint(tmp_path / "lora.ckpt")
    assert back.model.lora is not None


def test_variant_mismatch(tiny_data):
    st = init_state(tiny_cfg(variant="f"))
    st.cfg = st.cfg.replace(variant="n")
    with pytest.raises(ConfigError):
        train_step([sample_episode(tiny_data, st.rng)], st)


def test_dropout_in_step_uses_null_token(tiny_data):
    st = init_state(tiny_cfg(p_drop=0.999999))
    before = st.model.null_token.data.copy()
    with deterministic():
        train(st, tiny_data, 1)
    assert not np.array_equal(before, st.model.null_token.data)
    st = init_state(tiny_cfg(p_drop=0.0))
    before = st.model.null_token.data.copy()
    with deterministic():
        train(st, tiny_data, 1)
    # weight decay still moves it slightly, but no gradient reaches it
    np.testing.assert_allclose(st.model.null_token.data, before * (1 - st.cfg.lr * st.cfg.weight_decay),
                               rtol=1e-6)


def test_episode_sampling_pairs(tiny_data):
    rng = np.random.default_rng(0)
    for _ in range(200):
        ep = sample_episode(tiny_data, rng)
        q, p = ep.query_index, ep.prompt_indices[0]
        assert q != p
        assert ep.category_id in tiny_data.records[q].categories
        assert ep.category_id in tiny_data.records[p].categories
        assert np.array_equal(ep.query_mask, tiny_data.labels[q] == ep.category_id)


def test_video_episodes_share_video(tiny_video):
    rng = np.random.default_rng(1)
    for _ in range(200):
        ep = sample_episode(tiny_video, rng)
        assert tiny_video.video_of[ep.query_index] == tiny_video.video_of[ep.prompt_indices[0]]


def test_two_image_pairs_uniform(tmp_path):
    from ldmseg.data import Record, SegDataset
    labels = np.zeros((2, 4, 4), np.uint8)
    labels[:, 1, 1] = 1
    recs = [Record(f"s{i}", "", "", [1], 1) for i in range(2)]
    ds = SegDataset(recs, np.zeros((2, 3, 4, 4)), labels)
    rng = np.random.default_rng(5)
    qs = np.array([sample_episode(ds, rng).query_index for _ in range(4000)])
    counts = np.bincount(qs, minlength=2)
    assert stats.chisquare(counts).pvalue > 0.01


def test_no_pairable_category():
    from ldmseg.data import Record, SegDataset
    labels = np.ones((1, 4, 4), np.uint8)
    ds = SegDataset([Record("a", "", "", [1], 1)], np.zeros((1, 3, 4, 4)), labels)
    with pytest.raises(ValueError):
        sample_episode(ds, np.random.default_rng(0))


@pytest.fixture(scope="module")
def one_category(tmp_path_factory):
    from ldmseg.data import SegDataset, SyntheticDatasetSpec, generate_dataset
    out = tmp_path_factory.mktemp("onecat")
    generate_dataset(SyntheticDatasetSpec(resolution=16, categories=("square",), samples_per_category=8,
                                          distractors=(0, 0), radius=(3.0, 5.0), seed=2), out)
    return SegDataset.load(out / "manifest.jsonl")


@pytest.mark.parametrize("variant", ["f", "n"])
def test_loss_halves_within_500_steps(variant, one_category):
    cfg = tiny_cfg(variant=variant, iters=500, lr=2e-3, batch=4, base_width=16)
    rng = np.random.default_rng(11)
    # the objective on fixed batches with fixed noise, timesteps and dropout; per-step losses of the
    # multi-step variant swing with the sampled timesteps
    probe = [[sample_episode(one_category, rng) for _ in range(8)] for _ in range(16)]
    st = init_state(cfg)
    first = heldout_loss(probe, st)
    with deterministic():
        train(st, one_category, 500)
    last = heldout_loss(probe, st)
    assert last < 0.5 * first, (first, last)
