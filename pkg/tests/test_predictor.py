"""Tests for the multi-modal guidance sampler."""

import numpy as np
import pytest
import torch

from blurdecomp import netcore
from blurdecomp import predictor as pr
from blurdecomp import scenegen as sg
from blurdecomp.decomposer import DecomposerConfig, build_decomposer, save_decomposer
from blurdecomp.guidance import GuidanceConfig, MotionGuidance, _encoding_table, invert_labels

torch.set_num_threads(1)


def tiny_config(**kw):
    base = dict(d_z=2, widths=(8, 12, 16), n_res_blocks=1, encoder_width=8,
                disc_width=8, learning_rate=1e-3, batch_size=2, epochs=12,
                seed=0, crop_size=16)
    base.update(kw)
    return pr.PredictorConfig(**base)


def roll_triplets(n, size=16, seed0=0):
    out = []
    for s in range(n):
        shift = [(2, 2), (2, -2), (-2, 2), (-2, -2)][s % 4]
        frames, flows = sg.generate_roll_scene(size, size, shift=shift,
                                               n_frames=3, seed=seed0 + s,
                                               cell=8, fine_mix=0.0)
        out.append(sg.build_triplet(frames, flows, t=3,
                                    guidance_config=GuidanceConfig()))
    return out


# ---------------------------------------------------------------------------
# KL term


def test_kl_closed_form_reference_values():
    # all-ones mean, unit variance, 8 dims: 0.5 * sum(1 + 1 - 1 - 0) = 4
    mu = torch.ones(1, 8)
    logvar = torch.zeros(1, 8)
    assert pr.kl_divergence(mu, logvar).item() == pytest.approx(4.0, abs=1e-6)
    # the prior itself has zero divergence
    assert pr.kl_divergence(torch.zeros(1, 8), torch.zeros(1, 8)).item() == 0.0


def test_kl_matches_monte_carlo():
    torch.manual_seed(3)
    mu = torch.tensor([[0.7, -1.2]])
    logvar = torch.tensor([[0.4, -0.9]])
    closed = pr.kl_divergence(mu, logvar).item()

    # estimate E_q[log q(z) - log p(z)] by sampling q directly
    n = 400_000
    std = torch.exp(0.5 * logvar)
    z = mu + std * torch.randn(n, 2)
    log_q = (-0.5 * ((z - mu) / std) ** 2 - torch.log(std)
             - 0.5 * np.log(2 * np.pi)).sum(dim=1)
    log_p = (-0.5 * z ** 2 - 0.5 * np.log(2 * np.pi)).sum(dim=1)
    estimate = (log_q - log_p).mean().item()
    assert estimate == pytest.approx(closed, rel=0.02)


def test_kl_nonnegative_on_random_inputs():
    torch.manual_seed(0)
    kl = pr.kl_divergence(torch.randn(64, 5) * 3, torch.randn(64, 5) * 2)
    assert (kl >= 0).all()


# ---------------------------------------------------------------------------
# encoding helpers


def test_soft_encode_one_hot_matches_table():
    config = GuidanceConfig()
    table = pr.encoding_table_tensor(config)
    labels = torch.tensor([[[0, 1], [3, 4]]])
    onehot = torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).float()
    enc = pr.soft_encode(onehot, table)
    ref = _encoding_table(config.num_directions)
    for y in range(2):
        for x in range(2):
            lab = labels[0, y, x].item()
            assert np.allclose(enc[0, :, y, x].numpy(), ref[lab])


def test_class_weights_inverse_frequency():
    # 12 zeros, 4 ones, class 2 absent
    maps = [np.array([[0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 1, 1, 1]],
                     dtype=np.uint8),
            np.array([[1]], dtype=np.uint8)]
    w = pr.class_weights(maps, 3)
    assert w[2] == 0.0
    assert w[1] > w[0] > 0
    assert (w[0] + w[1]).item() / 2 == pytest.approx(1.0, abs=1e-6)
    # inverse frequency up to the common normalizer
    assert (w[1] / w[0]).item() == pytest.approx(13 / 4, rel=1e-5)


# ---------------------------------------------------------------------------
# model plumbing


def test_encode_latent_shapes_and_determinism():
    model = pr.build_predictor(tiny_config())
    labels = np.random.default_rng(0).integers(0, 5, (16, 16)).astype(np.uint8)
    guid = MotionGuidance(labels, GuidanceConfig())
    mu, logvar = pr.encode_latent(guid, model)
    assert mu.shape == (2,) and logvar.shape == (2,)
    assert np.isfinite(mu).all() and np.isfinite(logvar).all()
    mu2, logvar2 = pr.encode_latent(guid, model)
    assert np.array_equal(mu, mu2) and np.array_equal(logvar, logvar2)


def test_encode_latent_rejects_config_mismatch():
    model = pr.build_predictor(tiny_config())
    labels = np.zeros((16, 16), dtype=np.uint8)
    guid = MotionGuidance(labels, GuidanceConfig(num_directions=8))
    with pytest.raises(ValueError):
        pr.encode_latent(guid, model)


def test_sample_guidance_untrained_is_well_formed():
    model = pr.build_predictor(tiny_config())
    tri = roll_triplets(1)[0]
    guid, logits = pr.sample_guidance(tri.blurry, np.zeros(2), model)
    assert guid.labels.shape == (16, 16)
    assert guid.labels.max() <= 4
    assert logits.shape == (5, 16, 16)
    assert np.array_equal(logits.argmax(axis=0).astype(np.uint8), guid.labels)


def test_sample_guidance_validates_latent():
    model = pr.build_predictor(tiny_config())
    tri = roll_triplets(1)[0]
    with pytest.raises(ValueError):
        pr.sample_guidance(tri.blurry, np.zeros(3), model)


def test_predict_multimodal_nested_and_deterministic():
    model = pr.build_predictor(tiny_config())
    tri = roll_triplets(1)[0]
    s3 = pr.predict_multimodal(tri.blurry, 3, model, seed=42)
    s5 = pr.predict_multimodal(tri.blurry, 5, model, seed=42)
    assert len(s3) == 3 and len(s5) == 5
    for a, b in zip(s3, s5):
        assert np.array_equal(a.labels, b.labels)
    again = pr.predict_multimodal(tri.blurry, 3, model, seed=42)
    for a, b in zip(s3, again):
        assert np.array_equal(a.labels, b.labels)
    with pytest.raises(ValueError):
        pr.predict_multimodal(tri.blurry, 0, model)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(d_z=0).validate()
    with pytest.raises(ValueError):
        tiny_config(lambda_vae=-1.0).validate()
    with pytest.raises(ValueError):
        tiny_config(tau_end=0.0).validate()
    with pytest.raises(ValueError):
        tiny_config(crop_size=18).validate()
    with pytest.raises(ValueError):
        tiny_config(flip_augmentation=True,
                    guidance=GuidanceConfig(num_directions=2)).validate()


def test_config_roundtrip():
    config = tiny_config(lambda_gan=0.25, epochs=7)
    clone = pr.PredictorConfig.from_dict(config.to_dict())
    assert clone == config


def test_gumbel_temperature_schedule():
    config = tiny_config(epochs=5, tau_start=1.0, tau_end=0.5)
    taus = [pr.gumbel_temperature(e, config) for e in range(5)]
    assert taus[0] == 1.0 and taus[-1] == 0.5
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert pr.gumbel_temperature(0, tiny_config(epochs=1)) == 0.5


def test_predictor_pairs_include_both_directions():
    tris = roll_triplets(2)
    pairs = pr._predictor_pairs(tris, tiny_config())
    assert len(pairs) == 4
    assert np.array_equal(pairs[1][1], invert_labels(tris[0].guidance).labels)
    assert pairs[0][0] is pairs[1][0]  # same blurry image both directions
    bad = tiny_config(guidance=GuidanceConfig(num_directions=8))
    with pytest.raises(ValueError):
        pr._predictor_pairs(tris, bad)


# ---------------------------------------------------------------------------
# training behavior (kept tiny; quality is covered by the acceptance suite)


@pytest.fixture(scope="module")
def vae_only_run():
    tris = roll_triplets(3)
    config = tiny_config(lambda_gan=0.0, epochs=12)
    model, history = pr.train_predictor(tris, config, val_triplets=tris[:1])
    return model, history


def test_vae_only_ce_decreases(vae_only_run):
    _, history = vae_only_run
    assert history[-1]["ce"] < history[0]["ce"]


def test_kl_logged_nonnegative_every_epoch(vae_only_run):
    _, history = vae_only_run
    assert all(row["kl"] >= 0 for row in history)
    assert all(row["gan_g"] == 0.0 for row in history)


def test_history_row_fields(vae_only_run):
    _, history = vae_only_run
    row = history[0]
    for key in ("ce", "kl", "gan_g", "gan_d", "d_acc", "epoch", "tau",
                "val_ce", "collapse_warning"):
        assert key in row
    assert np.isfinite(row["val_ce"])


def test_adversarial_run_populates_gan_fields():
    tris = roll_triplets(2)
    config = tiny_config(lambda_gan=0.1, epochs=2)
    _, history = pr.train_predictor(tris, config)
    assert any(row["gan_d"] > 0 for row in history)
    assert all(row["collapse_warning"] in (0, 1) for row in history)
    assert all(0.0 <= row["d_acc"] <= 1.0 for row in history)


def test_divergent_training_aborts():
    tris = roll_triplets(2)
    config = tiny_config(lambda_gan=0.0, epochs=3, learning_rate=1e8)
    with pytest.raises(RuntimeError, match="non-finite"):
        pr.train_predictor(tris, config)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        pr.train_predictor([], tiny_config())


def test_training_is_reproducible():
    tris = roll_triplets(2)
    config = tiny_config(lambda_gan=0.1, epochs=2)
    m1, h1 = pr.train_predictor(tris, config, val_triplets=tris[:1])
    m2, h2 = pr.train_predictor(tris, config, val_triplets=tris[:1])
    assert h1 == h2
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path, vae_only_run):
    model, _ = vae_only_run
    path = tmp_path / "pred.ckpt"
    pr.save_predictor(path, model)
    loaded = pr.load_predictor(path)
    assert loaded.config == model.config
    for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()),
                                  sorted(loaded.state_dict().items())):
        assert ka == kb
        assert torch.equal(va, vb)
    # the reloaded model samples identically
    tri = roll_triplets(1)[0]
    a = pr.predict_multimodal(tri.blurry, 2, model, seed=5)
    b = pr.predict_multimodal(tri.blurry, 2, loaded, seed=5)
    for ga, gb in zip(a, b):
        assert np.array_equal(ga.labels, gb.labels)


def test_load_rejects_other_checkpoint_kinds(tmp_path):
    dec = build_decomposer(DecomposerConfig(t=2, widths=(8, 12, 16),
                                            n_res_blocks=1))
    path = tmp_path / "dec.ckpt"
    save_decomposer(path, dec)
    with pytest.raises(ValueError, match="not a predictor"):
        pr.load_predictor(path)
