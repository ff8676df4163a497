"""Owner/cloud protocol: obfuscated dataset with anonymous labels, cloud-side RecNet
training, owner-side inference ExtNet -> ObfNet -> RecNet and utility evaluation.

The trust boundary is the :class:`ObfuscatedDataset` file: the cloud step only ever
receives one, and it holds no images, no original labels and no key material.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import IdentityDataset
from .errors import DatasetFileError, InvalidArgumentError, ShapeError
from .models import ExtNet, RecNet, RecNetConfig, TrainConfig, TrainRun, ext_forward, rec_forward, train_classifier
from .obfuscation import ObfuscationKey, obfuscate


@dataclass(frozen=True)
class AnonymousLabelMap:
    """Owner-secret bijection from identity names to anonymous labels ``0..C-1``."""

    names: tuple
    anon: tuple  # anon[k] is the anonymous label of names[k]

    @classmethod
    def random(cls, names, seed: int) -> "AnonymousLabelMap":
        perm = np.random.default_rng([seed, 31337]).permutation(len(names))
        return cls(tuple(names), tuple(int(a) for a in perm))

    @classmethod
    def identity(cls, names) -> "AnonymousLabelMap":
        return cls(tuple(names), tuple(range(len(names))))

    def forward(self, name) -> int:
        return self.anon[self.names.index(name)]

    def inverse(self, label: int):
        return self.names[self.anon.index(int(label))]

    def encode(self, labels) -> np.ndarray:
        """Map dataset label indices (positions in ``names``) to anonymous labels."""
        return np.asarray(self.anon, dtype=np.int64)[np.asarray(labels)]


def model_hash(model) -> str:
    """Hash of a model's config and weights (provenance only)."""
    h = hashlib.sha256(json.dumps(model.cfg.__dict__, sort_keys=True).encode())
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


_OBF_MAGIC = b"XNNO"
_OBF_VERSION = 1
_OBF_HEADER = struct.Struct("<4sHIIII64s16s")


@dataclass
class ObfuscatedDataset:
    """What the owner sends to the cloud: features + anonymous labels + provenance."""

    features: np.ndarray  # (n, P, D) float32
    labels: np.ndarray  # (n,) anonymous labels
    num_classes: int
    ext_hash: str
    key_fingerprint: str

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.features.shape[1:]

    def to_bytes(self) -> bytes:
        n, p, d = self.features.shape
        head = _OBF_HEADER.pack(_OBF_MAGIC, _OBF_VERSION, self.num_classes, p, d, n,
                                self.ext_hash.encode().ljust(64, b"\0"),
                                self.key_fingerprint.encode().ljust(16, b"\0"))
        return (head + self.features.astype("<f4").tobytes()
                + self.labels.astype("<u4").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "ObfuscatedDataset":
        if data[:4] != _OBF_MAGIC:
            raise DatasetFileError("not an obfuscated-dataset file")
        if len(data) < _OBF_HEADER.size:
            raise DatasetFileError("obfuscated-dataset file truncated")
        _, version, c, p, d, n, ext_hash, fp = _OBF_HEADER.unpack_from(data)
        if version != _OBF_VERSION:
            raise DatasetFileError(f"unsupported obfuscated-dataset version {version}")
        if len(data) != _OBF_HEADER.size + 4 * n * p * d + 4 * n:
            raise DatasetFileError("obfuscated-dataset file has the wrong length")
        off = _OBF_HEADER.size
        feats = np.frombuffer(data, "<f4", n * p * d, off).reshape(n, p, d).astype(np.float32)
        labels = np.frombuffer(data, "<u4", n, off + 4 * n * p * d).astype(np.int64)
        return cls(feats, labels, c, ext_hash.rstrip(b"\0").decode(), fp.rstrip(b"\0").decode())

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "ObfuscatedDataset":
        return cls.from_bytes(Path(path).read_bytes())


def build_obfuscated_dataset(dataset: IdentityDataset, ext: ExtNet, key: ObfuscationKey,
                             map_seed: int, label_map: AnonymousLabelMap | None = None,
                             features: np.ndarray | None = None):
    """Owner side. Returns ``(ObfuscatedDataset, AnonymousLabelMap)``; keep the map secret.

    ``features`` may pass precomputed ExtNet features of ``dataset.images``.
    """
    if (ext.cfg.num_patches, ext.cfg.embed_dim) != (key.patches, key.dim):
        raise ShapeError(f"key (P={key.patches}, D={key.dim}) does not fit ExtNet output "
                         f"(P={ext.cfg.num_patches}, D={ext.cfg.embed_dim})")
    if label_map is None:
        label_map = AnonymousLabelMap.random(dataset.names, map_seed)
    if features is None:
        features = ext_forward(dataset.images, ext)
    obf = obfuscate(features, key)
    ds = ObfuscatedDataset(obf, label_map.encode(dataset.labels), dataset.num_ids,
                           model_hash(ext), key.fingerprint())
    return ds, label_map


def train_recnet_obf(obf_ds: ObfuscatedDataset, rec_cfg: RecNetConfig, tcfg: TrainConfig) -> TrainRun:
    """Cloud side: sees only the obfuscated features and anonymous labels."""
    if len(obf_ds) == 0:
        raise InvalidArgumentError("obfuscated dataset is empty")
    if rec_cfg.num_classes != obf_ds.num_classes:
        rec_cfg = replace(rec_cfg, num_classes=obf_ds.num_classes)
    return train_classifier(obf_ds.features, obf_ds.labels, rec_cfg, tcfg)


def infer_embedding(image, ext: ExtNet, key: ObfuscationKey, rec: RecNet) -> np.ndarray:
    """Owner-side embedding(s) of one image or a batch of images."""
    return rec_forward(obfuscate(ext_forward(image, ext), key), rec)[0]


def gallery_probe_split(labels, seed: int = 0):
    """Per identity with m >= 2 samples: first ceil(m/2) of a seeded shuffle -> gallery,
    the rest -> probes. Returns (gallery_index, probe_index, skipped_ids)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 271828])
    gal, probe, skipped = [], [], []
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        if len(idx) < 2:
            skipped.append(int(c))
            continue
        g = math.ceil(len(idx) / 2)
        gal.extend(idx[:g])
        probe.extend(idx[g:])
    return np.array(gal, dtype=np.int64), np.array(probe, dtype=np.int64), skipped


def identification_accuracy(embeddings, labels, seed: int = 0) -> float:
    """Closed-set top-1 accuracy: each probe is assigned to the identity whose gallery
    centroid is most cosine-similar."""
    emb = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    labels = np.asarray(labels)
    gal, probe, skipped = gallery_probe_split(labels, seed)
    if skipped:
        warnings.warn(f"{len(skipped)} identities with < 2 samples skipped in utility evaluation")
    if len(probe) == 0:
        raise InvalidArgumentError("no identity has two or more samples")
    emb = emb / np.maximum(np.linalg.norm(emb, axis=1, keepdims=True), 1e-12)
    ids = np.unique(labels[gal])
    cents = np.stack([emb[gal[labels[gal] == c]].mean(0) for c in ids])
    cents /= np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
    pred = ids[np.argmax(emb[probe] @ cents.T, axis=1)]
    return float(np.mean(pred == labels[probe]))


def eval_utility(testset: IdentityDataset, ext: ExtNet, key: ObfuscationKey, rec: RecNet,
                 seed: int = 0, features: np.ndarray | None = None) -> float:
    if features is None:
        features = ext_forward(testset.images, ext)
    emb = rec_forward(obfuscate(features, key), rec)[0]
    return identification_accuracy(emb, testset.labels, seed)
