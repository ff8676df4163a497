import math
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from xnn.data import SynthConfig, generate_synthetic_identities
from xnn.errors import CheckpointError, InvalidArgumentError, NumericError, ShapeError, TrainingDiverged
from xnn.models import (ExtNet, ExtNetConfig, RecNet, RecNetConfig, TrainConfig, build, ext_forward, fit,
                        load_params, params_equal, params_snapshot, pretrain_ext, rec_forward, save_params,
                        train_classifier)


def tiny_rec(**kw):
    cfg = RecNetConfig(embed_dim=4, num_blocks=1, num_classes=2, embedding_dim=2, num_heads=1, mlp_ratio=1.0)
    return build(RecNet, replace(cfg, **kw), 0)


def test_ext_output_shape_and_patches():
    cfg = ExtNetConfig(image_size=32, patch_size=8, embed_dim=64)
    assert cfg.num_patches == 16
    ext = build(ExtNet, cfg, 0)
    fm = ext_forward(np.zeros((32, 32, 3)), ext)
    assert fm.shape == (16, 64) and np.all(np.isfinite(fm))


def test_ext_deterministic_and_checks():
    ext = build(ExtNet, ExtNetConfig(), 1)
    img = np.random.default_rng(0).random((2, 32, 32, 3))
    a = ext_forward(np.stack([img[0], img[0]]), ext)
    assert np.array_equal(a[0], a[1])
    assert np.array_equal(ext_forward(img, ext), ext_forward(img, ext))
    with pytest.raises(ShapeError):
        ext_forward(np.zeros((2, 16, 16, 3)), ext)
    bad = img.copy()
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        ext_forward(bad, ext)


def test_ext_config_invariant():
    with pytest.raises(InvalidArgumentError):
        ExtNetConfig(image_size=30, patch_size=8)


def test_rec_embedding_unit_norm_and_logits():
    rec = build(RecNet, RecNetConfig(num_classes=7), 0)
    emb, logits = rec_forward(np.random.default_rng(1).standard_normal((5, 16, 64)), rec)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-5)
    assert logits.shape == (5, 7)
    with pytest.raises(ShapeError):
        rec_forward(np.zeros((16, 63)), rec)
    with pytest.raises(InvalidArgumentError):
        RecNetConfig(num_classes=1)


def test_rec_permutation_invariant():
    rec = build(RecNet, RecNetConfig(num_classes=5), 3)
    rng = np.random.default_rng(2)
    fm = rng.standard_normal((16, 64)).astype(np.float32)
    base = rec_forward(fm, rec)[1]
    for _ in range(10):
        np.testing.assert_allclose(rec_forward(fm[rng.permutation(16)], rec)[1], base, rtol=1e-4, atol=1e-5)


def test_rec_with_position_embedding_is_order_sensitive():
    rec = build(RecNet, RecNetConfig(num_classes=5, position_embedding=True), 3)
    with torch.no_grad():
        rec.pos_embed.mul_(50)
    fm = np.random.default_rng(2).standard_normal((16, 64)).astype(np.float32)
    assert not np.allclose(rec_forward(fm[::-1].copy(), rec)[1], rec_forward(fm, rec)[1], atol=1e-4)


def test_gradient_matches_finite_differences():
    rec = tiny_rec().double()
    n_params = sum(p.numel() for p in rec.parameters())
    assert n_params <= 200
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(3, 5, 4, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 1])
    rec.train()

    def loss():
        return F.cross_entropy(rec(x)[1], y)

    rec.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in rec.parameters()]).clone()
    numeric = torch.zeros_like(analytic)
    h, k = 1e-6, 0
    with torch.no_grad():
        for p in rec.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss().item()
                flat[i] = old - h
                down = loss().item()
                flat[i] = old
                numeric[k] = (up - down) / (2 * h)
                k += 1
    rel = (analytic - numeric).norm() / analytic.norm()
    assert rel <= 1e-4


def test_save_load_bit_exact(tmp_path):
    for model in (build(ExtNet, ExtNetConfig(use_layer_norm_tail=True), 4), build(RecNet, RecNetConfig(), 5)):
        save_params(model, tmp_path / "m.npz", {"config_hash": "abc"})
        back = load_params(tmp_path / "m.npz")
        assert type(back) is type(model) and back.cfg == model.cfg
        assert params_equal(back, model)
        assert back.provenance == {"config_hash": "abc"} and back.init_seed == model.init_seed
    (tmp_path / "x.npz").write_bytes(b"zz")
    with pytest.raises(CheckpointError):
        load_params(tmp_path / "x.npz")


def test_build_seeded():
    a, b, c = build(RecNet, RecNetConfig(), 1), build(RecNet, RecNetConfig(), 1), build(RecNet, RecNetConfig(), 2)
    assert params_equal(a, b) and not params_equal(a, c)


def test_effective_batch_size():
    t = TrainConfig(batch_size=256)
    assert t.effective_batch_size(10000) == 256
    assert t.effective_batch_size(1200) == 120
    assert t.effective_batch_size(5) == 1
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=0)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(batch_size=0)


def _toy(n=200, c=4, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((c, 1, 8)) * 2
    y = rng.integers(0, c, n)
    x = centers[y] + 0.3 * rng.standard_normal((n, 3, 8))
    return x.astype(np.float32), y


def test_fit_learns_and_records():
    x, y = _toy()
    cfg = RecNetConfig(embed_dim=8, num_blocks=1, num_classes=4, embedding_dim=4, num_heads=2)
    run = train_classifier(x, y, cfg, TrainConfig(epochs=6, batch_size=32, seed=0))
    assert run.losses[-1] < run.losses[0]
    assert run.accuracies[-1] > 0.9
    assert len(run.lrs) == 6 and run.lrs[0] == pytest.approx(0.05)
    # cosine schedule decays monotonically
    assert all(a >= b for a, b in zip(run.lrs, run.lrs[1:]))
    assert run.steps == 6 * math.ceil(200 / 20)
    again = train_classifier(x, y, cfg, TrainConfig(epochs=6, batch_size=32, seed=0))
    assert again.losses == run.losses and params_equal(again.model, run.model)


def test_fit_soft_labels():
    x, y = _toy()
    soft = np.eye(4, dtype=np.float32)[y]
    cfg = RecNetConfig(embed_dim=8, num_blocks=1, num_classes=4, embedding_dim=4, num_heads=2)
    run = train_classifier(x, soft, cfg, TrainConfig(epochs=3, batch_size=32))
    assert run.accuracies[-1] > 0.5


def test_fit_label_range_checked():
    x, y = _toy()
    cfg = RecNetConfig(embed_dim=8, num_blocks=1, num_classes=3, embedding_dim=4, num_heads=2)
    with pytest.raises(InvalidArgumentError):
        train_classifier(x, y, cfg, TrainConfig(epochs=1))
    with pytest.raises(InvalidArgumentError):
        train_classifier(x[:0], y[:0], cfg, TrainConfig(epochs=1))


def test_fit_nan_aborts_with_partial_run():
    x, y = _toy()
    x[50:] = np.nan
    cfg = RecNetConfig(embed_dim=8, num_blocks=1, num_classes=4, embedding_dim=4, num_heads=2)
    with pytest.raises(TrainingDiverged) as info:
        train_classifier(x, y, cfg, TrainConfig(epochs=2, batch_size=20, seed=1))
    assert info.value.run.partial


def test_pretrain_ext_frozen_and_loss_decreases():
    pub = generate_synthetic_identities(SynthConfig(8, 10, image_size=16, intra_class_noise=0.2, seed=9))
    ext = pretrain_ext(pub, ExtNetConfig(image_size=16, embed_dim=16, num_blocks=1, num_heads=2),
                       TrainConfig(epochs=4, batch_size=16))
    assert ext.pretrain_run.losses[-1] < ext.pretrain_run.losses[0]
    assert not any(p.requires_grad for p in ext.parameters())
    snap = params_snapshot(ext)
    ext_forward(pub.images, ext)
    assert all(torch.equal(snap[k], v) for k, v in ext.state_dict().items())
