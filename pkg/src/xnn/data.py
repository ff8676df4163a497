"""Identity datasets: synthetic generation, image-folder ingestion, identity-disjoint splits."""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DatasetFileError, InvalidArgumentError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff", ".ppm", ".webp"}


@dataclass
class IdentityDataset:
    """Images with integer identity labels.

    ``labels[i]`` indexes ``names``; labels are contiguous ``0..C-1``. ``role`` is one
    of ``owner``, ``owner-train``, ``owner-test``, ``public``, ``attacker``.
    """

    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    names: list
    role: str = "owner"
    split_seed: int | None = None
    paths: list | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise InvalidArgumentError("images and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def num_ids(self) -> int:
        return len(self.names)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, index, role=None) -> "IdentityDataset":
        """Samples at ``index``, relabelled so the kept identities are contiguous again."""
        index = np.asarray(index)
        labels = self.labels[index]
        kept = np.unique(labels)
        remap = np.full(self.num_ids, -1, dtype=np.int64)
        remap[kept] = np.arange(len(kept))
        return IdentityDataset(
            self.images[index], remap[labels], [self.names[k] for k in kept],
            role or self.role, self.split_seed,
            None if self.paths is None else [self.paths[i] for i in index],
        )

    def sample_hashes(self) -> list:
        return [hashlib.sha1(img.tobytes()).hexdigest() for img in self.images]

    def manifest(self) -> dict:
        return {
            "role": self.role,
            "split_seed": self.split_seed,
            "num_ids": self.num_ids,
            "num_samples": len(self),
            "names": list(self.names),
            "samples": [
                {"path": None if self.paths is None else str(self.paths[i]),
                 "id": self.names[int(self.labels[i])], "label": int(self.labels[i]), "split": self.role}
                for i in range(len(self))
            ],
        }

    def write_manifest(self, path) -> None:
        Path(path).write_text(json.dumps(self.manifest(), indent=1))


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic identities: each identity is a prototype image drawn from a shared
    low-rank "face space", each sample is prototype + i.i.d. Gaussian pixel noise.

    ``world_seed`` fixes the face space (shared by every dataset of one experiment);
    ``seed`` draws the identities, so datasets with different seeds hold disjoint
    identities. ``prototype_rank=None`` draws full-rank prototypes.
    """

    num_ids: int = 50
    images_per_id: int = 30
    image_size: int = 32
    channels: int = 3
    intra_class_noise: float = 0.1
    inter_class_separation: float = 1.0
    prototype_rank: int | None = 32
    world_seed: int = 0
    seed: int = 0
    name_prefix: str = "id"


def _face_space(cfg: SynthConfig):
    n_pix = cfg.image_size * cfg.image_size * cfg.channels
    rng = np.random.default_rng([cfg.world_seed, n_pix])
    mean = 0.5 + 0.1 * rng.standard_normal(n_pix)
    rank = n_pix if cfg.prototype_rank is None else min(cfg.prototype_rank, n_pix)
    basis, _ = np.linalg.qr(rng.standard_normal((n_pix, rank)))
    return mean, basis


def generate_synthetic_identities(cfg: SynthConfig, role: str = "owner") -> IdentityDataset:
    if cfg.num_ids < 2:
        raise InvalidArgumentError("num_ids must be at least 2")
    if cfg.images_per_id < 1:
        raise InvalidArgumentError("images_per_id must be at least 1")
    if not cfg.intra_class_noise > 0:
        raise InvalidArgumentError("intra_class_noise must be positive")
    if cfg.intra_class_noise >= cfg.inter_class_separation:
        warnings.warn("intra-class noise is not below the class separation; identities may overlap")
    mean, basis = _face_space(cfg)
    n_pix, rank = basis.shape
    rng = np.random.default_rng([cfg.seed, 7919])
    # per-pixel RMS of an identity offset is separation / 4
    coeff = rng.standard_normal((cfg.num_ids, rank)) * math.sqrt(n_pix / rank) * cfg.inter_class_separation / 4
    protos = mean + coeff @ basis.T
    noise = rng.standard_normal((cfg.num_ids, cfg.images_per_id, n_pix)) * cfg.intra_class_noise
    images = np.clip(protos[:, None, :] + noise, 0.0, 1.0).astype(np.float32)
    images = images.reshape(-1, cfg.image_size, cfg.image_size, cfg.channels)
    labels = np.repeat(np.arange(cfg.num_ids), cfg.images_per_id)
    names = [f"{cfg.name_prefix}{cfg.seed}-{k:04d}" for k in range(cfg.num_ids)]
    return IdentityDataset(images, labels, names, role, cfg.seed)


def preprocess(image, target_size: int = 32, channels: int = 3) -> np.ndarray:
    """Scale to [0, 1] and resize (bilinear, corners not aligned) to a square image."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or 0 in img.shape:
        raise InvalidArgumentError(f"cannot preprocess image of shape {img.shape}")
    if np.issubdtype(img.dtype, np.integer):
        img = img.astype(np.float32) / 255.0
    else:
        img = img.astype(np.float32)
        if img.max(initial=0.0) > 1.0:
            img = img / 255.0
    if img.shape[2] == 1 and channels == 3:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] == 4 and channels == 3:
        img = img[:, :, :3]
    elif img.shape[2] != channels:
        raise InvalidArgumentError(f"cannot map {img.shape[2]} channels to {channels}")
    if img.shape[:2] != (target_size, target_size):
        t = torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)[None]
        t = F.interpolate(t, size=(target_size, target_size), mode="bilinear", align_corners=False)
        img = t[0].permute(1, 2, 0).numpy()
    return np.clip(img, 0.0, 1.0)


def load_image_folder(path, image_size: int = 32, role: str = "owner") -> IdentityDataset:
    """Read ``root/<identity>/<image>``; identities are numbered by sorted directory name."""
    from PIL import Image, UnidentifiedImageError

    root = Path(path)
    id_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    images, labels, names, paths = [], [], [], []
    skipped = 0
    for d in id_dirs:
        files = sorted(f for f in d.iterdir() if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES)
        label = len(names)
        got = 0
        for f in files:
            try:
                with Image.open(f) as im:
                    arr = np.asarray(im.convert("RGB"))
            except (UnidentifiedImageError, OSError, ValueError):
                skipped += 1
                continue
            images.append(preprocess(arr, image_size))
            labels.append(label)
            paths.append(str(f))
            got += 1
        if got:
            names.append(d.name)
    if skipped:
        warnings.warn(f"skipped {skipped} unreadable image(s) under {root}")
    if not names:
        raise InvalidArgumentError(f"no identities with readable images under {root}")
    if len(names) < 2:
        warnings.warn("only one identity found; identification needs at least two")
    ds = IdentityDataset(np.stack(images), np.array(labels), names, role, paths=paths)
    ds.skipped = skipped
    return ds


def split_by_identity(ds: IdentityDataset, test_ids: int, test_images_per_id: int, seed: int = 0):
    """Identity-disjoint (train, test) split.

    Test identities are sampled uniformly; each keeps exactly ``test_images_per_id``
    images and its surplus images are dropped from both splits.
    """
    counts = np.bincount(ds.labels, minlength=ds.num_ids)
    eligible = np.flatnonzero(counts >= test_images_per_id)
    if test_ids >= ds.num_ids:
        raise InvalidArgumentError(f"need more than {test_ids} identities, dataset has {ds.num_ids}")
    if len(eligible) < test_ids:
        raise InvalidArgumentError(
            f"only {len(eligible)} identities have >= {test_images_per_id} images; {test_ids} requested")
    rng = np.random.default_rng([seed, 104729])
    chosen = np.sort(rng.choice(eligible, size=test_ids, replace=False))
    is_test = np.isin(ds.labels, chosen)
    test_index = []
    for c in chosen:
        idx = np.flatnonzero(ds.labels == c)
        test_index.extend(np.sort(rng.permutation(idx)[:test_images_per_id]))
    train = ds.subset(np.flatnonzero(~is_test), role="owner-train")
    test = ds.subset(np.array(test_index, dtype=np.int64), role="owner-test")
    train.split_seed = test.split_seed = seed
    return train, test


def concat(datasets, role=None) -> IdentityDataset:
    """Stack datasets with disjoint identities into one, relabelling contiguously."""
    images, labels, names = [], [], []
    for ds in datasets:
        images.append(ds.images)
        labels.append(ds.labels + len(names))
        names.extend(ds.names)
    if len(set(names)) != len(names):
        raise InvalidArgumentError("datasets share identity names")
    return IdentityDataset(np.concatenate(images), np.concatenate(labels), names,
                           role or datasets[0].role)


def save_dataset(ds: IdentityDataset, path, meta: dict | None = None) -> None:
    """Write images, labels and names to ``.npz`` (``meta`` is stored as JSON)."""
    info = {"role": ds.role, "split_seed": ds.split_seed, "names": list(ds.names),
            "paths": ds.paths, "meta": meta or {}}
    blob = np.frombuffer(json.dumps(info).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, images=ds.images, labels=ds.labels, __info__=blob)
    tmp.replace(path)


def load_dataset(path) -> IdentityDataset:
    try:
        with np.load(path, allow_pickle=False) as z:
            images, labels = z["images"], z["labels"]
            info = json.loads(z["__info__"].tobytes().decode())
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetFileError(f"cannot read dataset {path}: {exc}") from exc
    ds = IdentityDataset(images, labels, info["names"], info["role"], info["split_seed"], info["paths"])
    if len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= ds.num_ids):
        raise DatasetFileError(f"{path}: labels out of range for {ds.num_ids} identities")
    ds.meta = info.get("meta", {})
    return ds
