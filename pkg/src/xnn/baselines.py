"""Comparison conditions: the undefended pipeline and InstaHide image encoding."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import IdentityDataset
from .errors import InvalidArgumentError, ShapeError
from .models import ExtNet, RecNetConfig, TrainConfig, TrainRun, ext_forward, rec_forward, train_classifier
from .obfuscation import identity_key
from .pipeline import (AnonymousLabelMap, build_obfuscated_dataset, eval_utility, identification_accuracy,
                       train_recnet_obf)


@dataclass(frozen=True)
class InstaHideConfig:
    k: int = 2
    dominance_threshold: float = 0.65
    encode_test: bool = True  # owner also encodes query images at inference
    sign_readout: str = "abs"  # how the frozen ExtNet reads encoded images: "abs" or "raw"

    def __post_init__(self):
        if self.k < 2:
            raise InvalidArgumentError("InstaHide needs k >= 2")
        if not 1.0 / self.k <= self.dominance_threshold <= 1.0:
            raise InvalidArgumentError("dominance_threshold must lie in [1/k, 1]")
        if self.sign_readout not in ("abs", "raw"):
            raise InvalidArgumentError(f"unknown sign_readout {self.sign_readout!r}")


def sample_coefficients(k: int, threshold: float, rng: np.random.Generator) -> np.ndarray:
    """Positive mixing weights summing to one, resampled until max <= threshold.
    Entry 0 is the weight of the private image."""
    while True:
        lam = rng.dirichlet(np.ones(k))
        if lam.max() <= threshold:
            return lam


def instahide_encode(image, partners, cfg: InstaHideConfig, rng: np.random.Generator,
                     return_coefficients: bool = False):
    """``mask * sum_i lam_i * image_i`` with a fresh pixel-wise random sign mask."""
    image = np.asarray(image, dtype=np.float64)
    partners = np.asarray(partners, dtype=np.float64)
    if cfg.k < 2:
        raise InvalidArgumentError("InstaHide needs k >= 2")
    if partners.shape != (cfg.k - 1,) + image.shape:
        raise ShapeError(f"expected {cfg.k - 1} partner images of shape {image.shape}, got {partners.shape}")
    lam = sample_coefficients(cfg.k, cfg.dominance_threshold, rng)
    mixed = lam[0] * image + np.tensordot(lam[1:], partners, axes=1)
    out = rng.choice(np.array([-1.0, 1.0]), size=image.shape) * mixed
    return (out, lam) if return_coefficients else out


def instahide_batch(images, labels, pool_images, pool_labels, num_classes: int,
                    cfg: InstaHideConfig, rng: np.random.Generator):
    """Encode a batch with partners drawn from ``pool``. Returns (encoded float32,
    soft labels) where labels mix by the same weights (pool labels < 0 carry no label)."""
    n = len(images)
    out = np.empty(images.shape, dtype=np.float32)
    soft = np.zeros((n, num_classes), dtype=np.float32)
    for i in range(n):
        pick = rng.choice(len(pool_images), size=cfg.k - 1, replace=False)
        out[i], lam = instahide_encode(images[i], pool_images[pick], cfg, rng, return_coefficients=True)
        soft[i, labels[i]] += lam[0]
        for j, w in zip(pick, lam[1:]):
            if pool_labels is not None and pool_labels[j] >= 0:
                soft[i, pool_labels[j]] += w
    soft /= soft.sum(1, keepdims=True)
    return out, soft


def run_vanilla_pipeline(train: IdentityDataset, test: IdentityDataset, ext: ExtNet,
                         rec_cfg: RecNetConfig, tcfg: TrainConfig, eval_seed: int = 0,
                         train_features=None, test_features=None):
    """No-defense pipeline: the XNN pipeline with the identity key and identity label map.

    Returns ``(utility, run, exposed_test_features)``.
    """
    key = identity_key(ext.cfg.num_patches, ext.cfg.embed_dim)
    obf_ds, _ = build_obfuscated_dataset(train, ext, key, 0, AnonymousLabelMap.identity(train.names),
                                         features=train_features)
    run = train_recnet_obf(obf_ds, rec_cfg, tcfg)
    if test_features is None:
        test_features = ext_forward(test.images, ext)
    util = eval_utility(test, ext, key, run.model, eval_seed, features=test_features)
    return util, run, test_features


def readout(encoded, cfg: InstaHideConfig) -> np.ndarray:
    """Image handed to the ExtNet. Pixels live in [0, 1], so ``abs`` removes the sign
    mask exactly and leaves the convex mixture; ``raw`` feeds the masked image."""
    encoded = np.asarray(encoded, dtype=np.float32)
    return np.abs(encoded) if cfg.sign_readout == "abs" else encoded


def instahide_features(images, pool_images, ext: ExtNet, cfg: InstaHideConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """ExtNet features of freshly encoded images (partners from ``pool_images``)."""
    enc, _ = instahide_batch(images, np.zeros(len(images), dtype=np.int64), pool_images, None, 1, cfg, rng)
    return ext_forward(readout(enc, cfg), ext)


def run_instahide_pipeline(train: IdentityDataset, test: IdentityDataset, ext: ExtNet,
                           rec_cfg: RecNetConfig, tcfg: TrainConfig, cfg: InstaHideConfig,
                           seed: int = 0, eval_seed: int = 0):
    """Owner encodes its training set once (partners from the same train split), the cloud
    trains a RecNet on ExtNet features of the encodings with mixed soft labels.

    Returns ``(utility, run, transmitted_test_features)``.
    """
    rng = np.random.default_rng([seed, 4242])
    enc, soft = instahide_batch(train.images, train.labels, train.images, train.labels,
                                train.num_ids, cfg, rng)
    run = train_classifier(ext_forward(readout(enc, cfg), ext), soft,
                           replace(rec_cfg, num_classes=train.num_ids), tcfg)
    if cfg.encode_test:
        test_feats = instahide_features(test.images, train.images, ext, cfg, rng)
    else:
        test_feats = ext_forward(test.images, ext)
    util = identification_accuracy(rec_forward(test_feats, run.model)[0], test.labels, eval_seed)
    return util, run, test_feats


def train_instahide_attacker(public: IdentityDataset, ext: ExtNet, cfg: InstaHideConfig,
                             rec_cfg: RecNetConfig, tcfg: TrainConfig, seed: int = 0) -> TrainRun:
    """Expectation-style adversary for InstaHide: a RecNet trained on public images that
    are re-encoded with fresh coefficients and masks in every minibatch."""
    rng = np.random.default_rng([seed, 5151])

    def encode(xb, yb, step):
        enc, soft = instahide_batch(xb, yb, public.images, public.labels, public.num_ids, cfg, rng)
        return ext_forward(readout(enc, cfg), ext), soft

    return train_classifier(public.images, public.labels, replace(rec_cfg, num_classes=public.num_ids),
                            tcfg, batch_transform=encode)
