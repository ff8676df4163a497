"""Seeded desk-scale benchmarks: every condition of the comparison tables for one seed.

Each benchmark returns a list of MetricsRecord, one per condition. All randomness is
derived from the seed through ``seed_plan``, so reruns with equal config and seed give
identical records apart from ``wall_time``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .attacks import (Gallery, blackbox_surrogate_attack, expectation_attack, reference_gallery,
                      train_expectation_recnet)
from .baselines import (InstaHideConfig, instahide_features, run_instahide_pipeline, run_vanilla_pipeline,
                        train_instahide_attacker)
from .config import ExperimentConfig
from .data import (IdentityDataset, SynthConfig, concat, generate_synthetic_identities, load_image_folder,
                   split_by_identity)
from .models import (ExtNet, RecNetConfig, ext_forward, freeze, pretrain_ext, random_ext, rec_forward,
                     train_classifier)
from .obfuscation import KeySampler, identity_key, keygen, obfuscate
from .pipeline import build_obfuscated_dataset, eval_utility, train_recnet_obf
from .report import MetricsRecord
from .xnnd import (DistillConfig, NoiseGenConfig, distill_recnet, eval_xnnd, feature_generator, noised_features,
                   train_noise_generator, with_layer_norm_tail)


def seed_plan(seed: int) -> dict:
    """All sub-seeds of one benchmark seed."""
    return {"seed": seed, "owner": 100 * seed + 1, "public": 100 * seed + 2, "distractors": 100 * seed + 3,
            "attacker": 100 * seed + 4, "key": 100 * seed + 5, "key_sampler": 100 * seed + 6,
            "label_map": 100 * seed + 7, "random_ext": 100 * seed + 8, "split": seed, "train": seed,
            "eval": seed}


@dataclass
class World:
    train: IdentityDataset
    test: IdentityDataset
    public: IdentityDataset
    distractors: IdentityDataset
    attacker: IdentityDataset


_cache: dict = {}


def clear_caches() -> None:
    _cache.clear()


def _synth(cfg: ExperimentConfig, n_ids, per_id, seed, role, prefix) -> IdentityDataset:
    d = cfg.data
    sc = SynthConfig(n_ids, per_id, d.image_size, cfg.extnet.channels, d.intra_class_noise,
                     d.inter_class_separation, d.prototype_rank, d.world_seed, seed, prefix)
    return generate_synthetic_identities(sc, role)


def make_world(cfg: ExperimentConfig, seed: int) -> World:
    key = ("world", repr(cfg.data), cfg.extnet.channels, seed)
    if key in _cache:
        return _cache[key]
    plan, d = seed_plan(seed), cfg.data
    if d.source == "folder":
        owner = load_image_folder(d.folder, d.image_size, "owner")
    else:
        owner = _synth(cfg, d.num_ids, d.images_per_id, plan["owner"], "owner", "own")
    train, test = split_by_identity(owner, d.test_ids, d.test_images_per_id, plan["split"])
    world = World(
        train, test,
        _synth(cfg, d.public_ids, d.public_images_per_id, plan["public"], "public", "pub"),
        _synth(cfg, d.distractor_ids, 1, plan["distractors"], "attacker", "dis"),
        _synth(cfg, d.attacker_ids, d.attacker_images_per_id, plan["attacker"], "attacker", "att"),
    )
    _cache[key] = world
    return world


def pretrained_ext(cfg: ExperimentConfig, seed: int, world: World | None = None) -> ExtNet:
    key = ("ext", repr(cfg.data), repr(cfg.extnet), repr(cfg.train), seed)
    if key not in _cache:
        world = world or make_world(cfg, seed)
        _cache[key] = pretrain_ext(world.public, cfg.extnet, replace(cfg.train, seed=seed))
    return _cache[key]


def _rec_cfg(cfg: ExperimentConfig, num_classes: int) -> RecNetConfig:
    return replace(cfg.recnet, embed_dim=cfg.extnet.embed_dim, num_classes=num_classes,
                   num_patches=cfg.extnet.num_patches)


class _Recorder:
    def __init__(self, cfg: ExperimentConfig, run_id: str, seed: int):
        self.cfg, self.run_id, self.plan = cfg, run_id, seed_plan(seed)
        self.records = []
        self.t = time.perf_counter()

    def add(self, condition, utility=None, leakage=None, runs=(), **metrics):
        now = time.perf_counter()
        curves = {}
        for name, run in runs:
            curves[f"{name}_loss"] = [float(x) for x in run.losses]
            curves[f"{name}_acc"] = [float(x) for x in run.accuracies]
        self.records.append(MetricsRecord(
            run_id=self.run_id, condition=condition, config_hash=self.cfg.config_hash(), seeds=dict(self.plan),
            utility=None if utility is None else float(utility),
            leakage=None if leakage is None else leakage.to_json(),
            metrics={k: _plain(v) for k, v in metrics.items()}, loss_curves=curves,
            config=self.cfg.to_dict(), wall_time=now - self.t))
        self.t = now


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_plain(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def expectation_gallery(world: World):
    """Victim references (one image per test identity) plus one-image distractor identities.
    Returns (ids, gallery_images, probe_index, probe_ids)."""
    test = world.test
    ids, ref, rest = reference_gallery(test, seed=test.split_seed or 0)
    gal_ids = np.concatenate([ids, np.asarray(world.distractors.names)])
    gal_images = np.concatenate([test.images[ref], world.distractors.images])
    probe_ids = np.asarray(test.names)[test.labels[rest]]
    return gal_ids, gal_images, rest, probe_ids


def run_xnn_benchmark(cfg: ExperimentConfig, seed: int) -> list:
    """Vanilla, XNN, ablations and InstaHide baselines, with expectation-attack leakage."""
    plan = seed_plan(seed)
    world = make_world(cfg, seed)
    train, test = world.train, world.test
    tc = replace(cfg.train, seed=plan["train"])
    rec = _rec_cfg(cfg, train.num_ids)
    P, D = cfg.extnet.num_patches, cfg.extnet.embed_dim
    rec_out = _Recorder(cfg, f"xnn-bench-s{seed}", seed)

    ext = pretrained_ext(cfg, seed, world)
    f_train, f_test = ext_forward(train.images, ext), ext_forward(test.images, ext)
    f_public = ext_forward(world.public.images, ext)
    gal_ids, gal_images, rest, probe_ids = expectation_gallery(world)
    f_gal = ext_forward(gal_images, ext)

    # no defense
    u_van, run_van, _ = run_vanilla_pipeline(train, test, ext, rec, tc, plan["eval"], f_train, f_test)
    van_sampler = KeySampler(plan["key_sampler"], P, D, frozen=identity_key(P, D))
    van_adv = train_expectation_recnet(world.public, ext, van_sampler, rec, tc, features=f_public)
    rep_van = expectation_attack(van_adv.model, f_test[rest], probe_ids, Gallery(gal_ids, f_gal))
    rec_out.add("vanilla", u_van, rep_van, [("rec", run_van), ("attacker", van_adv)],
                ext_pretrain_acc=ext.pretrain_run.accuracies[-1])

    # keyed obfuscation
    key = keygen(plan["key"], P, D, cfg.obf.matrix_kind)
    obf_ds, _ = build_obfuscated_dataset(train, ext, key, plan["label_map"], features=f_train)
    run_xnn = train_recnet_obf(obf_ds, rec, tc)
    u_xnn = eval_utility(test, ext, key, run_xnn.model, plan["eval"], features=f_test)
    sampler = KeySampler(plan["key_sampler"], P, D, cfg.obf.matrix_kind)
    exp_adv = train_expectation_recnet(world.public, ext, sampler, rec, tc, features=f_public)
    g_xnn = f_gal if cfg.attack.gallery_mode == "clean" else obfuscate(f_gal, key)
    rep_xnn = expectation_attack(exp_adv.model, obfuscate(f_test[rest], key), probe_ids,
                                 Gallery(gal_ids, g_xnn), exclude_self=cfg.attack.exclude_self)
    rec_out.add("xnn", u_xnn, rep_xnn, [("rec", run_xnn), ("attacker", exp_adv)],
                train_acc=run_xnn.accuracies[-1], key_fingerprint=key.fingerprint(),
                attacker_keys=len(set(exp_adv.extra["key_fingerprints"])))

    # ablation: untrained ExtNet
    rext = random_ext(cfg.extnet, plan["random_ext"])
    u_rand, run_rand, _ = run_vanilla_pipeline(train, test, rext, rec, tc, plan["eval"])
    rec_out.add("random-ext", u_rand, None, [("rec", run_rand)])

    # ablation: RecNet trained on public clean features, frozen, never sees owner data
    pub_run = train_classifier(f_public, world.public.labels, replace(rec, num_classes=world.public.num_ids), tc)
    u_pub = eval_utility(test, ext, key, freeze(pub_run.model), plan["eval"], features=f_test)
    rec_out.add("pretrain-rec", u_pub, None, [("rec", pub_run)])

    b = cfg.baselines
    for k in b.instahide_k:
        ih = InstaHideConfig(k, b.dominance_threshold, b.encode_test, b.sign_readout)
        u_ih, run_ih, t_feats = run_instahide_pipeline(train, test, ext, rec, tc, ih, plan["train"], plan["eval"])
        ih_adv = train_instahide_attacker(world.public, ext, ih, rec, tc, plan["attacker"])
        if cfg.attack.gallery_mode == "clean":
            g_ih = f_gal
        else:
            g_ih = instahide_features(gal_images, world.public.images, ext, ih,
                                      np.random.default_rng([plan["attacker"], k]))
        rep_ih = expectation_attack(ih_adv.model, t_feats[rest], probe_ids, Gallery(gal_ids, g_ih),
                                    attack_name="expectation-instahide")
        rec_out.add(f"instahide-k{k}", u_ih, rep_ih, [("rec", run_ih), ("attacker", ih_adv)])
    return rec_out.records


def run_xnnd_benchmark(cfg: ExperimentConfig, seed: int) -> list:
    """Clean-feature baseline vs. noise encoder + distilled student, black-box attacked."""
    plan = seed_plan(seed)
    world = make_world(cfg, seed)
    train, test = world.train, world.test
    tc = replace(cfg.train, seed=plan["train"])
    rec = _rec_cfg(cfg, train.num_ids)
    x = cfg.xnnd
    rec_out = _Recorder(cfg, f"xnnd-bench-s{seed}", seed)

    ext = with_layer_norm_tail(pretrained_ext(cfg, seed, world))
    f_train, f_test = ext_forward(train.images, ext), ext_forward(test.images, ext)
    teacher_run = train_classifier(f_train, train.labels, rec, tc)
    teacher = freeze(teacher_run.model)

    ids, ref, rest = reference_gallery(test, plan["eval"])
    att_gallery = concat([world.attacker, test.subset(ref)], role="attacker")
    probe_ids = np.asarray(test.names)[test.labels[rest]]

    def attack(gen):
        fg = feature_generator(ext, gen)
        return blackbox_surrogate_attack(fg, att_gallery, rec, tc, fg(test.images[rest]), probe_ids,
                                         cfg.attack.query_budget, plan["attacker"])

    rep_base = attack(None)
    base = eval_xnnd(test, ext, None, teacher, [rep_base], plan["eval"], f_test)
    rec_out.add("xnnd-baseline", base["utility"], rep_base,
                [("teacher", teacher_run), ("surrogate", rep_base.surrogate_run)])

    gcfg = NoiseGenConfig.like(cfg.extnet, mix_alpha=x.mix_alpha, beta=x.beta,
                               adv_steps_per_rec_step=x.adv_steps_per_rec_step, objective=x.objective)
    gen, adv, hist = train_noise_generator(train, ext, gcfg, teacher, replace(tc, epochs=x.game_epochs),
                                           gen_lr=x.gen_lr, features=f_train, adv_reset_every=x.adv_reset_every)
    dcfg = DistillConfig(x.temperature, x.ce_weight, x.distill_epochs, plan["train"])
    student_run = distill_recnet(train, ext, gen, teacher, rec, dcfg, tc, features=f_train,
                                 init=adv if x.student_init == "adversary" else None)
    # same student recipe with distillation off (pure CE on mixed features)
    plain_run = distill_recnet(train, ext, gen, teacher, rec, replace(dcfg, ce_weight=1.0), tc, features=f_train)
    u_plain = eval_xnnd(test, ext, gen, plain_run.model, (), plan["eval"], f_test)["utility"]
    rep_x = attack(gen)
    res = eval_xnnd(test, ext, gen, student_run.model, [rep_x], plan["eval"], f_test)
    mixed = noised_features(f_train, gen)

    def acc(model, feats):
        return float(np.mean(rec_forward(feats, model)[1].argmax(1) == train.labels))

    rec_out.add("xnnd", res["utility"], rep_x, [("student", student_run), ("surrogate", rep_x.surrogate_run)],
                game=hist, adversary_acc_mixed=acc(adv, mixed), adversary_acc_clean=acc(adv, f_train),
                teacher_acc_clean=acc(teacher, f_train), teacher_acc_mixed=acc(teacher, mixed),
                nodistill_utility=u_plain)
    return rec_out.records


def sweep_layers(cfg: ExperimentConfig, component: str, layers, seed: int = 0) -> list:
    """XNN utility as the block count of ``component`` ('extnet' or 'recnet') varies."""
    if component not in ("extnet", "recnet"):
        raise ValueError(f"component must be 'extnet' or 'recnet', got {component!r}")
    plan = seed_plan(seed)
    rec_out = _Recorder(cfg, f"sweep-{component}-s{seed}", seed)
    for n in layers:
        c = cfg
        if component == "extnet":
            c = replace(cfg, extnet=replace(cfg.extnet, num_blocks=n))
        else:
            c = replace(cfg, recnet=replace(cfg.recnet, num_blocks=n))
        world = make_world(c, seed)
        tc = replace(c.train, seed=plan["train"])
        ext = pretrained_ext(c, seed, world)
        key = keygen(plan["key"], c.extnet.num_patches, c.extnet.embed_dim, c.obf.matrix_kind)
        f_test = ext_forward(world.test.images, ext)
        obf_ds, _ = build_obfuscated_dataset(world.train, ext, key, plan["label_map"])
        run = train_recnet_obf(obf_ds, _rec_cfg(c, world.train.num_ids), tc)
        u = eval_utility(world.test, ext, key, run.model, plan["eval"], features=f_test)
        rec_out.add(f"xnn-{component}{n}", u, None, [("rec", run)], component=component, blocks=n)
    return rec_out.records


def mean_by_condition(records) -> dict:
    out = {}
    for r in records:
        out.setdefault(r.condition, []).append(r)
    return out


__all__ = ["seed_plan", "make_world", "pretrained_ext", "run_xnn_benchmark", "run_xnnd_benchmark",
           "sweep_layers", "clear_caches", "expectation_gallery", "mean_by_condition", "World"]
