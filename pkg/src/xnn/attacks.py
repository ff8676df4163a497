"""Identity leakage and the two adversaries.

Leakage of an attack ``A`` is the fraction of probes ``(f, p)`` for which ``A(f)``
returns the gallery entry of identity ``p``. A gallery holds one entry per identity,
so a blind guess scores ``1/N``.

Attacks are callables ``attack(probe_features) -> gallery indices`` over a stacked
batch of probe features.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .data import IdentityDataset
from .errors import InvalidArgumentError, OracleError, ShapeError
from .models import ExtNet, RecNet, RecNetConfig, TrainConfig, TrainRun, ext_forward, rec_forward, train_classifier
from .obfuscation import KeySampler, obfuscate


@dataclass
class Gallery:
    ids: np.ndarray  # (N,) identity names, unique
    entries: np.ndarray  # (N, E) embeddings or (N, P, D) feature maps

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        self.entries = np.asarray(self.entries)
        if len(self.ids) < 2:
            raise InvalidArgumentError("a gallery needs at least two entries")
        if len(np.unique(self.ids)) != len(self.ids):
            raise InvalidArgumentError("gallery identities must be unique (one match per identity)")
        if len(self.entries) != len(self.ids):
            raise InvalidArgumentError("gallery ids and entries differ in length")

    def __len__(self):
        return len(self.ids)

    def check_covers(self, probe_ids) -> None:
        missing = set(np.unique(probe_ids)) - set(self.ids.tolist())
        if missing:
            raise InvalidArgumentError(f"{len(missing)} probe identities have no gallery match")


@dataclass
class LeakageReport:
    leak: float
    n_gallery: int
    chance: float
    attack_name: str
    n_probes: int
    hits: list = field(default_factory=list)
    queries: int | None = None
    degenerate: bool = False
    notes: str = ""

    def sigma(self) -> float:
        """Binomial std of the hit fraction under blind guessing."""
        return math.sqrt(self.chance * (1 - self.chance) / max(self.n_probes, 1))

    def to_json(self) -> dict:
        return {"leak": self.leak, "n_gallery": self.n_gallery, "chance": self.chance,
                "attack": self.attack_name, "n_probes": self.n_probes,
                "hits": [bool(h) for h in self.hits], "queries": self.queries,
                "degenerate": self.degenerate, "notes": self.notes}

    @classmethod
    def from_json(cls, d) -> "LeakageReport":
        return cls(d["leak"], d["n_gallery"], d["chance"], d["attack"], d["n_probes"],
                   list(d["hits"]), d.get("queries"), d.get("degenerate", False), d.get("notes", ""))


def identity_leakage(probe_features, probe_ids, gallery: Gallery, attack: Callable,
                     attack_name: str = "attack") -> LeakageReport:
    probe_ids = np.asarray(probe_ids)
    if len(probe_ids) == 0:
        raise InvalidArgumentError("no probes")
    gallery.check_covers(probe_ids)
    picked = np.asarray(attack(probe_features)).reshape(-1)
    if len(picked) != len(probe_ids):
        raise ShapeError("attack returned a different number of answers than probes")
    hits = gallery.ids[picked] == probe_ids
    n = len(gallery)
    return LeakageReport(float(hits.mean()), n, 1.0 / n, attack_name, len(probe_ids), hits.tolist())


def _unit(x):
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def nearest_cosine(gallery_embeddings, exclude=None) -> Callable:
    """Top-1 cosine attack; ties go to the lowest gallery index.

    ``exclude(probe_batch) -> bool mask (n_probes, N)`` marks inadmissible entries.
    """
    g = _unit(gallery_embeddings)

    def attack(probe_embeddings):
        sims = _unit(probe_embeddings) @ g.T
        if exclude is not None:
            sims = np.where(exclude(probe_embeddings), -np.inf, sims)
        return np.argmax(sims, axis=1)

    return attack


def random_guess(n_gallery: int, seed: int = 0) -> Callable:
    rng = np.random.default_rng(seed)
    return lambda probes: rng.integers(0, n_gallery, size=len(probes))


def train_expectation_recnet(public: IdentityDataset, ext: ExtNet, key_sampler: KeySampler,
                             rec_cfg: RecNetConfig, tcfg: TrainConfig,
                             features: np.ndarray | None = None) -> TrainRun:
    """Adversary's RecNet, trained with a freshly sampled key for every minibatch.

    The fingerprints of the keys used are recorded in ``run.extra["key_fingerprints"]``.
    """
    if features is None:
        features = ext_forward(public.images, ext)
    fingerprints = []

    def fresh_key(xb, yb, step):
        key = key_sampler()
        fingerprints.append(key.fingerprint())
        return obfuscate(xb, key), yb

    rec_cfg = replace(rec_cfg, num_classes=public.num_ids)
    run = train_classifier(features, public.labels, rec_cfg, tcfg, batch_transform=fresh_key)
    run.extra["key_fingerprints"] = fingerprints
    return run


def expectation_attack(exp_rec: RecNet, probe_features, probe_ids, gallery: Gallery,
                       exclude_self: bool = False, attack_name: str = "expectation") -> LeakageReport:
    """Embed probe and gallery feature maps with the Expectation-RecNet, then top-1 cosine.

    With ``exclude_self`` a gallery entry bit-identical to the probe is never returned.
    """
    probe_features = np.asarray(probe_features)
    if gallery.entries.shape[1:] != probe_features.shape[1:]:
        raise ShapeError("probe and gallery feature maps differ in shape")
    if probe_features.shape[-1] != exp_rec.cfg.embed_dim:
        raise ShapeError("feature dim does not match the Expectation-RecNet")
    g_emb = rec_forward(gallery.entries, exp_rec)[0]
    p_emb = rec_forward(probe_features, exp_rec)[0]
    exclude = None
    if exclude_self:
        g_flat = gallery.entries.reshape(len(gallery), -1)
        p_flat = probe_features.reshape(len(probe_features), -1)
        same = (p_flat[:, None, :] == g_flat[None, :, :]).all(-1)
        exclude = lambda _: same  # noqa: E731
    return identity_leakage(p_emb, probe_ids, gallery, nearest_cosine(g_emb, exclude), attack_name)


def reference_gallery(ds: IdentityDataset, seed: int = 0):
    """One reference sample per identity (seeded choice). Returns (ids, ref_index, rest_index)."""
    rng = np.random.default_rng([seed, 161803])
    ref, rest = [], []
    for c in range(ds.num_ids):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        ref.append(idx[0])
        rest.extend(idx[1:])
    return np.array(ds.names), np.array(ref, dtype=np.int64), np.sort(np.array(rest, dtype=np.int64))


def blackbox_surrogate_attack(fg_oracle: Callable, attacker_gallery: IdentityDataset,
                              rec_cfg: RecNetConfig, tcfg: TrainConfig,
                              victim_probes, victim_ids, query_budget: int | None = None,
                              seed: int = 0) -> LeakageReport:
    """Query-only adversary.

    The attacker pushes its own labelled images through ``fg_oracle`` (images -> the
    features the owner would transmit), trains a surrogate RecNet on the answers, and
    matches the victim's transmitted features against one oracle-embedded reference
    image per gallery identity. The gallery must include the victim identities.
    """
    victim_ids = np.asarray(victim_ids)
    ids, ref, _ = reference_gallery(attacker_gallery, seed)
    n = len(attacker_gallery)
    budget = n if query_budget is None else min(query_budget, n)
    order = np.arange(n) if budget == n else np.sort(
        np.random.default_rng([seed, 1414]).choice(n, budget, replace=False))
    queried = attacker_gallery.subset(order)
    try:
        feats = np.asarray(fg_oracle(queried.images))
        ref_feats = np.asarray(fg_oracle(attacker_gallery.images[ref]))
    except Exception as exc:  # the oracle is opaque; any failure aborts the attack
        partial = LeakageReport(0.0, len(ids), 1.0 / max(len(ids), 1), "blackbox", 0, [],
                                queries=0, notes=f"aborted: oracle failure ({exc})")
        err = OracleError(f"feature oracle failed: {exc}")
        err.report = partial
        raise err from exc
    queries = budget + len(ref)
    if queried.num_ids < 2:
        # a one-class surrogate cannot learn anything: every probe maps to the same entry
        hits = victim_ids == ids[0]
        return LeakageReport(float(hits.mean()), len(ids), 1.0 / len(ids), "blackbox",
                             len(victim_ids), hits.tolist(), queries, True,
                             "degenerate: attacker gallery has a single identity")
    rec_cfg = replace(rec_cfg, num_classes=queried.num_ids, embed_dim=feats.shape[-1])
    run = train_classifier(feats, queried.labels, rec_cfg, tcfg)
    report = expectation_attack(run.model, victim_probes, victim_ids, Gallery(ids, ref_feats),
                                attack_name="blackbox")
    report.queries = queries
    report.surrogate_run = run
    return report
