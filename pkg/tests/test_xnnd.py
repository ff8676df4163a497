import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from xnn.data import SynthConfig, generate_synthetic_identities
from xnn.errors import InvalidArgumentError, ShapeError
from xnn.models import (ExtNetConfig, RecNet, RecNetConfig, TrainConfig, build, ext_forward, freeze,
                        params_equal, params_snapshot, pretrain_ext, train_classifier)
from xnn.xnnd import (DistillConfig, NoiseGenConfig, NoiseGenerator, distill_loss, distill_recnet, eval_xnnd,
                      feature_generator, mix_features, noised_features, train_noise_generator,
                      with_layer_norm_tail)
from xnn.pipeline import identification_accuracy
from xnn.models import rec_forward

ECFG = ExtNetConfig(image_size=16, patch_size=4, embed_dim=16, num_blocks=1, num_heads=2)
RCFG = RecNetConfig(embed_dim=16, num_blocks=1, num_classes=5, embedding_dim=8, num_heads=2)
TCFG = TrainConfig(epochs=3, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def world():
    ds = generate_synthetic_identities(SynthConfig(5, 16, image_size=16, intra_class_noise=0.15, seed=4))
    public = generate_synthetic_identities(SynthConfig(6, 12, image_size=16, intra_class_noise=0.15, seed=5))
    ext = with_layer_norm_tail(pretrain_ext(public, ECFG, TrainConfig(epochs=4, batch_size=16)))
    feats = ext_forward(ds.images, ext)
    teacher = freeze(train_classifier(feats, ds.labels, RCFG, TCFG).model)
    return ds, ext, feats, teacher


def test_config_invariants():
    with pytest.raises(InvalidArgumentError):
        NoiseGenConfig(mix_alpha=-1)
    with pytest.raises(InvalidArgumentError):
        NoiseGenConfig(beta=0)
    with pytest.raises(InvalidArgumentError):
        DistillConfig(temperature=0)
    cfg = NoiseGenConfig.like(ECFG, beta=2.0)
    assert (cfg.embed_dim, cfg.num_patches, cfg.num_blocks) == (16, 16, 1) and cfg.beta == 2.0


def test_mix_limits():
    rng = np.random.default_rng(0)
    clean, noise = rng.standard_normal((2, 3, 4, 5))
    assert np.array_equal(mix_features(clean, noise, NoiseGenConfig(mix_alpha=0.0)), clean)
    assert np.array_equal(mix_features(clean, np.zeros_like(noise), NoiseGenConfig()), clean)
    with pytest.raises(ShapeError):
        mix_features(clean, noise[:, :2], NoiseGenConfig())


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), alpha=st.floats(0, 3), beta=st.floats(0.01, 5),
       scale=st.floats(1e-3, 1e3))
def test_noise_cap_property(seed, alpha, beta, scale):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal((2, 4, 6))
    noise = rng.standard_normal((2, 4, 6)) * scale
    cfg = NoiseGenConfig(mix_alpha=alpha, beta=beta)
    out = mix_features(clean, noise, cfg)
    for i in range(2):
        assert np.linalg.norm(out[i] - clean[i]) <= alpha * beta * np.linalg.norm(clean[i]) * (1 + 1e-9) + 1e-12
    t = mix_features(torch.from_numpy(clean), torch.from_numpy(noise), cfg).numpy()
    np.testing.assert_allclose(t, out, rtol=1e-9, atol=1e-9)


def test_generator_starts_at_zero_noise(world):
    _, _, feats, _ = world
    gen = build(NoiseGenerator, NoiseGenConfig.like(ECFG), 0)
    assert np.array_equal(noised_features(feats, gen), feats.astype(np.float32))


def test_frozen_generator_game_is_plain_training(world):
    ds, ext, feats, _ = world
    init = build(RecNet, RCFG, 7)
    gen, adv, hist = train_noise_generator(ds, ext, NoiseGenConfig.like(ECFG), init, TCFG, features=feats,
                                           freeze_generator=True)
    plain = train_classifier(feats, ds.labels, RCFG, TCFG, init=build(RecNet, RCFG, 7))
    assert params_equal(adv, plain.model)
    assert len(hist["adv_acc"]) == len(plain.accuracies)
    assert max(hist["noise_ratio"]) == 0.0


def test_game_respects_cap_and_lowers_adversary(world):
    ds, ext, feats, teacher = world
    cfg = NoiseGenConfig.like(ECFG, beta=1.0)
    gen, adv, hist = train_noise_generator(ds, ext, cfg, teacher, TrainConfig(epochs=12, batch_size=16),
                                           gen_lr=0.2, features=feats)
    assert max(hist["noise_ratio"]) <= cfg.mix_alpha * cfg.beta + 1e-5
    for key in ("adv_ce", "adv_acc", "gen_objective", "noise_ratio"):
        assert len(hist[key]) == 12
    mixed = noised_features(feats, gen)
    assert not np.allclose(mixed, feats)
    # moving averages (window 5): the adversary ends worse off than it started
    acc = np.convolve(hist["adv_acc"], np.ones(5) / 5, "valid")
    obj = np.convolve(hist["gen_objective"], np.ones(5) / 5, "valid")
    assert acc[-1] < acc[0] and obj[-1] > obj[0]
    assert not any(p.requires_grad for p in gen.parameters())


def test_distill_loss_pure_ce_limit():
    gen = torch.Generator().manual_seed(0)
    s, t = torch.randn(6, 5, generator=gen), torch.randn(6, 5, generator=gen)
    y = torch.tensor([0, 1, 2, 3, 4, 0])
    ce = F.cross_entropy(s, y)
    assert torch.allclose(distill_loss(s, t, y, DistillConfig(ce_weight=1.0)), ce, atol=1e-6)
    near = distill_loss(s, t, y, DistillConfig(ce_weight=1 - 1e-9, temperature=2.0))
    assert abs(near.item() - ce.item()) <= 1e-6
    # pure KL term at lam = 0 vanishes when student == teacher
    assert distill_loss(t, t, y, DistillConfig(ce_weight=0.0)).item() == pytest.approx(0.0, abs=1e-6)


def test_distill_keeps_frozen_parts(world):
    ds, ext, feats, teacher = world
    gen, adv, _ = train_noise_generator(ds, ext, NoiseGenConfig.like(ECFG), teacher, TCFG, features=feats)
    snaps = [params_snapshot(m) for m in (ext, gen, teacher)]
    run = distill_recnet(ds, ext, gen, teacher, RCFG, DistillConfig(epochs=3), TCFG, init=adv)
    for m, snap in zip((ext, gen, teacher), snaps):
        assert all(torch.equal(snap[k], v) for k, v in m.state_dict().items())
    assert run.losses[-1] < run.losses[0]
    assert run.accuracies[-1] > 1 / 5  # above chance
    assert not params_equal(run.model, adv)


def test_eval_without_generator_matches_clean_pipeline(world):
    ds, ext, feats, teacher = world
    res = eval_xnnd(ds, ext, None, teacher, seed=2)
    assert res["utility"] == identification_accuracy(rec_forward(feats, teacher)[0], ds.labels, 2)
    fg = feature_generator(ext, None)
    assert np.array_equal(fg(ds.images[:3]), feats[:3])
