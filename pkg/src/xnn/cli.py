"""Command-line entry points.

Exit codes: 0 success, 1 runtime error, 2 usage error. Outputs go under ``--out-root``
(default ``$XNN_OUTPUT_ROOT`` or ``./runs``) unless an explicit path is given. Values
from ``--config`` override built-in defaults; explicit flags override both.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bench
from .attacks import Gallery, blackbox_surrogate_attack, expectation_attack, reference_gallery, \
    train_expectation_recnet
from .baselines import InstaHideConfig, run_instahide_pipeline, run_vanilla_pipeline
from .config import ExperimentConfig, load_config
from .data import (SynthConfig, concat, generate_synthetic_identities, load_dataset, load_image_folder,
                   save_dataset, split_by_identity)
from .errors import XNNError
from .models import RecNet, build, ext_forward, freeze, load_params, pretrain_ext, save_params, train_classifier
from .obfuscation import KeySampler, identity_key, key_load, key_save, keygen, obfuscate
from .pipeline import ObfuscatedDataset, build_obfuscated_dataset, eval_utility, model_hash, train_recnet_obf
from .report import (MetricsRecord, emit_projection_plot, format_table, load_runs, plot_layer_sweep,
                     plot_loss_curves, report_rows, summarize, write_metrics)
from .xnnd import (DistillConfig, NoiseGenConfig, distill_recnet, eval_xnnd, feature_generator,
                   noised_features, train_noise_generator, with_layer_norm_tail)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _layers(text: str):
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split(".."))
            vals = list(range(lo, hi + 1))
        else:
            vals = [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a range like 1..4 or a list like 1,2,4, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("layer counts must be >= 1")
    return vals


def _seed_list(text: str):
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",")]


# ---------------------------------------------------------------- plumbing

class Ctx:
    def __init__(self, args):
        self.args = args
        cfg = load_config(getattr(args, "config", None))
        over = {"train.epochs": getattr(args, "epochs", None),
                "train.batch_size": getattr(args, "batch_size", None),
                "output.root": getattr(args, "out_root", None)}
        self.cfg: ExperimentConfig = cfg.override(over)
        self.seed = args.seed
        self.root = self.cfg.output.resolved_root()
        self.t0 = time.perf_counter()

    @property
    def tcfg(self):
        return replace(self.cfg.train, seed=self.seed)

    def provenance(self, **extra):
        return {"config_hash": self.cfg.config_hash(), "seed": self.seed, "command": self.args.cmd, **extra}

    def out_path(self, given, default_name):
        if given:
            p = Path(given)
        else:
            p = self.root / default_name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def record(self, condition, utility=None, leakage=None, runs=(), run_id=None, **metrics) -> Path:
        curves = {}
        for name, run in runs:
            curves[f"{name}_loss"] = [float(v) for v in run.losses]
        rid = run_id or f"{self.args.cmd}-s{self.seed}-{int(time.time() * 1000)}"
        rec = MetricsRecord(rid, condition, self.cfg.config_hash(), {"seed": self.seed},
                            None if utility is None else float(utility),
                            None if leakage is None else leakage.to_json(),
                            bench._plain(metrics), curves, self.cfg.to_dict(), time.perf_counter() - self.t0)
        path = self.root / "metrics" / f"{rid}-{condition}.json"
        write_metrics(rec, path)
        return path


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True, default=str))


def _ext(path):
    ext = load_params(path)
    if ext.kind != "extnet":
        raise XNNError(f"{path} holds a {ext.kind}, not an ExtNet")
    return freeze(ext)


def _rec_cfg(ctx, n_classes, dim):
    return replace(ctx.cfg.recnet, num_classes=n_classes, embed_dim=dim)


# ---------------------------------------------------------------- commands

def cmd_keygen(ctx, a):
    key = keygen(a.seed, a.patches, a.dim, a.kind)
    out = ctx.out_path(a.out, f"keys/key-s{a.seed}.xnnk")
    key_save(key, out)
    _emit({"key": str(out), "fingerprint": key.fingerprint(), "patches": a.patches, "dim": a.dim,
           "kind": a.kind, "seed": a.seed})


def cmd_synth_data(ctx, a):
    d = ctx.cfg.data
    sc = SynthConfig(a.num_ids or d.num_ids, a.images_per_id or d.images_per_id, d.image_size,
                     ctx.cfg.extnet.channels, a.noise if a.noise is not None else d.intra_class_noise,
                     d.inter_class_separation, d.prototype_rank, d.world_seed, a.seed, a.prefix)
    ds = generate_synthetic_identities(sc, a.role)
    out = ctx.out_path(a.out, f"data/{a.role}-s{a.seed}.npz")
    meta = ctx.provenance(synth=sc.__dict__)
    written = {}
    if a.test_ids:
        train, test = split_by_identity(ds, a.test_ids, a.test_images_per_id or d.test_images_per_id, a.seed)
        for part, sub in (("train", train), ("test", test)):
            p = out.with_name(f"{out.stem}-{part}.npz")
            save_dataset(sub, p, meta)
            sub.write_manifest(p.with_suffix(".manifest.json"))
            written[part] = str(p)
    else:
        save_dataset(ds, out, meta)
        ds.write_manifest(out.with_suffix(".manifest.json"))
        written["dataset"] = str(out)
    _emit({"written": written, "num_ids": ds.num_ids, "samples": len(ds)})


def cmd_ingest(ctx, a):
    ds = load_image_folder(a.folder, ctx.cfg.data.image_size, a.role)
    out = ctx.out_path(a.out, f"data/{a.role}-folder.npz")
    save_dataset(ds, out, ctx.provenance(folder=str(a.folder)))
    ds.write_manifest(out.with_suffix(".manifest.json"))
    _emit({"written": str(out), "num_ids": ds.num_ids, "samples": len(ds), "skipped": ds.skipped})


def cmd_pretrain_ext(ctx, a):
    public = load_dataset(a.data)
    ext = pretrain_ext(public, ctx.cfg.extnet, ctx.tcfg)
    prun = ext.pretrain_run
    if a.layer_norm_tail:
        ext = with_layer_norm_tail(ext)
    out = ctx.out_path(a.out, f"models/ext-s{ctx.seed}.npz")
    save_params(ext, out, ctx.provenance())
    m = ctx.record("pretrain-ext", runs=[("ext", prun)], train_acc=prun.accuracies[-1])
    _emit({"ext": str(out), "hash": model_hash(ext), "train_acc": prun.accuracies[-1],
           "metrics": str(m)})


def cmd_build_obf(ctx, a):
    ds, ext, key = load_dataset(a.data), _ext(a.ext), key_load(a.key)
    obf, lmap = build_obfuscated_dataset(ds, ext, key, a.map_seed)
    out = ctx.out_path(a.out, f"obf/obf-s{ctx.seed}.xnno")
    obf.save(out)
    map_out = Path(a.map_out) if a.map_out else out.with_suffix(".labelmap.json")
    map_out.write_text(json.dumps({"names": list(lmap.names), "anon": list(lmap.anon),
                                   "map_seed": a.map_seed, **ctx.provenance()}))
    _emit({"obf": str(out), "label_map": str(map_out), "samples": len(obf), "key": key.fingerprint()})


def _public_recnet(ctx, a, dim):
    """RecNet trained on clean public features; never sees the owner's data."""
    if not (a.public and a.ext):
        raise UsageError("--rec-init pretrained-public needs --public and --ext")
    public, ext = load_dataset(a.public), _ext(a.ext)
    return train_classifier(ext_forward(public.images, ext), public.labels,
                            _rec_cfg(ctx, public.num_ids, dim), ctx.tcfg).model


def cmd_train_rec(ctx, a):
    obf = ObfuscatedDataset.load(a.obf)
    rc = _rec_cfg(ctx, obf.num_classes, obf.features.shape[-1])
    init = _public_recnet(ctx, a, rc.embed_dim) if a.rec_init == "pretrained-public" else None
    if a.freeze_rec:
        # ablation: the cloud model is never fitted to the obfuscated data
        model = freeze(init if init is not None else build(RecNet, rc, ctx.seed))
        out = ctx.out_path(a.out, f"models/rec-frozen-s{ctx.seed}.npz")
        save_params(model, out, ctx.provenance(rec_init=a.rec_init, frozen=True))
        _emit({"rec": str(out), "frozen": True, "rec_init": a.rec_init})
        return
    if init is not None:
        # keep the trunk, start a fresh classifier sized for the anonymous labels
        fresh = build(RecNet, rc, ctx.seed)
        state = {k: v for k, v in init.state_dict().items() if k != "classifier"}
        fresh.load_state_dict(state, strict=False)
        run = train_classifier(obf.features, obf.labels, rc, ctx.tcfg, init=fresh)
    else:
        run = train_recnet_obf(obf, rc, ctx.tcfg)
    out = ctx.out_path(a.out, f"models/rec-s{ctx.seed}.npz")
    save_params(run.model, out, ctx.provenance(obf_key=obf.key_fingerprint, rec_init=a.rec_init))
    m = ctx.record("train-rec", runs=[("rec", run)], train_acc=run.accuracies[-1])
    _emit({"rec": str(out), "train_acc": run.accuracies[-1], "final_loss": run.losses[-1], "metrics": str(m)})


def cmd_eval_utility(ctx, a):
    test, ext, rec = load_dataset(a.data), _ext(a.ext), load_params(a.rec)
    key = key_load(a.key) if a.key else identity_key(ext.cfg.num_patches, ext.cfg.embed_dim)
    u = eval_utility(test, ext, key, rec, ctx.seed)
    m = ctx.record(a.condition, u)
    _emit({"utility": u, "metrics": str(m)})


def cmd_attack_expectation(ctx, a):
    public, test, ext = load_dataset(a.public), load_dataset(a.test), _ext(a.ext)
    P, D = ext.cfg.num_patches, ext.cfg.embed_dim
    key = key_load(a.key) if a.key else identity_key(P, D)
    frozen = identity_key(P, D) if key.is_identity else None
    sampler = KeySampler(ctx.seed, P, D, key.matrix_kind, frozen=frozen)
    run = train_expectation_recnet(public, ext, sampler, _rec_cfg(ctx, public.num_ids, D), ctx.tcfg)
    ids, ref, rest = reference_gallery(test, ctx.seed)
    gal_ids, gal_imgs = ids, test.images[ref]
    if a.distractors:
        dis = load_dataset(a.distractors)
        gal_ids = np.concatenate([ids, np.asarray(dis.names)])
        gal_imgs = np.concatenate([gal_imgs, dis.images])
    g = ext_forward(gal_imgs, ext)
    if a.gallery_mode == "obfuscated":
        g = obfuscate(g, key)
    probes = obfuscate(ext_forward(test.images[rest], ext), key)
    rep = expectation_attack(run.model, probes, np.asarray(test.names)[test.labels[rest]], Gallery(gal_ids, g))
    m = ctx.record(a.condition, None, rep, [("attacker", run)])
    _emit({"asr": rep.leak, "chance": rep.chance, "n_gallery": rep.n_gallery, "probes": rep.n_probes,
           "metrics": str(m)})


def cmd_attack_blackbox(ctx, a):
    test, ext, att = load_dataset(a.test), _ext(a.ext), load_dataset(a.attacker)
    gen = freeze(load_params(a.gen)) if a.gen else None
    fg = feature_generator(ext, gen)
    ids, ref, rest = reference_gallery(test, ctx.seed)
    gallery = concat([att, test.subset(ref)], role="attacker")
    rep = blackbox_surrogate_attack(fg, gallery, _rec_cfg(ctx, 2, ext.cfg.embed_dim), ctx.tcfg,
                                    fg(test.images[rest]), np.asarray(test.names)[test.labels[rest]],
                                    a.query_budget, ctx.seed)
    m = ctx.record(a.condition, None, rep)
    _emit({"asr": rep.leak, "chance": rep.chance, "queries": rep.queries, "degenerate": rep.degenerate,
           "metrics": str(m)})


def _teacher(ctx, a, ds, ext, f):
    if a.teacher:
        return freeze(load_params(a.teacher)), None
    run = train_classifier(f, ds.labels, _rec_cfg(ctx, ds.num_ids, ext.cfg.embed_dim), ctx.tcfg)
    return freeze(run.model), run


def cmd_xnnd_train_gen(ctx, a):
    ds, ext = load_dataset(a.data), _ext(a.ext)
    x = ctx.cfg.xnnd
    f = ext_forward(ds.images, ext)
    teacher, trun = _teacher(ctx, a, ds, ext, f)
    gcfg = NoiseGenConfig.like(ext.cfg, mix_alpha=x.mix_alpha, beta=a.beta or x.beta,
                               adv_steps_per_rec_step=x.adv_steps_per_rec_step, objective=x.objective)
    gen, adv, hist = train_noise_generator(ds, ext, gcfg, teacher, replace(ctx.tcfg, epochs=a.game_epochs or x.game_epochs),
                                           gen_lr=x.gen_lr, features=f, adv_reset_every=x.adv_reset_every)
    out = ctx.out_path(a.out, f"models/gen-s{ctx.seed}.npz")
    save_params(gen, out, ctx.provenance())
    save_params(adv, out.with_name(out.stem + "-adversary.npz"), ctx.provenance())
    written = {"gen": str(out), "adversary": str(out.with_name(out.stem + "-adversary.npz"))}
    if trun is not None:
        tp = out.with_name(out.stem + "-teacher.npz")
        save_params(teacher, tp, ctx.provenance())
        written["teacher"] = str(tp)
    m = ctx.record("xnnd-train-gen", game=hist)
    _emit({**written, "final_adv_acc": hist["adv_acc"][-1], "metrics": str(m)})


def cmd_xnnd_distill(ctx, a):
    ds, ext = load_dataset(a.data), _ext(a.ext)
    gen, teacher = freeze(load_params(a.gen)), freeze(load_params(a.teacher))
    x = ctx.cfg.xnnd
    init = freeze(load_params(a.init)) if a.init else None
    dcfg = DistillConfig(x.temperature, a.ce_weight if a.ce_weight is not None else x.ce_weight,
                         x.distill_epochs, ctx.seed)
    run = distill_recnet(ds, ext, gen, teacher, _rec_cfg(ctx, ds.num_ids, ext.cfg.embed_dim), dcfg, ctx.tcfg,
                         init=init)
    out = ctx.out_path(a.out, f"models/student-s{ctx.seed}.npz")
    save_params(run.model, out, ctx.provenance())
    m = ctx.record("xnnd-distill", runs=[("student", run)])
    _emit({"student": str(out), "final_loss": run.losses[-1], "metrics": str(m)})


def cmd_xnnd_eval(ctx, a):
    test, ext, student = load_dataset(a.data), _ext(a.ext), load_params(a.student)
    gen = freeze(load_params(a.gen)) if a.gen else None
    reports = []
    if a.attacker:
        att = load_dataset(a.attacker)
        fg = feature_generator(ext, gen)
        ids, ref, rest = reference_gallery(test, ctx.seed)
        reports.append(blackbox_surrogate_attack(
            fg, concat([att, test.subset(ref)], role="attacker"), _rec_cfg(ctx, 2, ext.cfg.embed_dim), ctx.tcfg,
            fg(test.images[rest]), np.asarray(test.names)[test.labels[rest]], None, ctx.seed))
    res = eval_xnnd(test, ext, gen, student, reports, ctx.seed)
    m = ctx.record("xnnd" if gen is not None else "xnnd-baseline", res["utility"],
                   reports[0] if reports else None)
    _emit({"utility": res["utility"], "asr": res["asr"], "metrics": str(m)})


def cmd_baseline(ctx, a):
    train, test, ext = load_dataset(a.data), load_dataset(a.test), _ext(a.ext)
    rc = _rec_cfg(ctx, train.num_ids, ext.cfg.embed_dim)
    if a.kind == "vanilla":
        u, run, _ = run_vanilla_pipeline(train, test, ext, rc, ctx.tcfg, ctx.seed)
        cond = "vanilla"
    else:
        b = ctx.cfg.baselines
        ih = InstaHideConfig(a.k, a.threshold if a.threshold is not None else b.dominance_threshold,
                             b.encode_test, b.sign_readout)
        u, run, _ = run_instahide_pipeline(train, test, ext, rc, ctx.tcfg, ih, ctx.seed, ctx.seed)
        cond = f"instahide-k{a.k}"
    m = ctx.record(cond, u, runs=[("rec", run)])
    _emit({"condition": cond, "utility": u, "metrics": str(m)})


def cmd_sweep_layers(ctx, a):
    recs = bench.sweep_layers(ctx.cfg, a.component, a.range, ctx.seed)
    out_dir = ctx.root / "metrics"
    for r in recs:
        write_metrics(r, out_dir / f"{r.run_id}-{r.condition}-{int(time.time() * 1000)}.json")
    curve = {"layers": a.range, "utility": [r.utility for r in recs]}
    plot = ctx.out_path(a.plot, f"figures/sweep-{a.component}-s{ctx.seed}.png")
    plot_layer_sweep(a.range, {"XNN": curve["utility"]}, plot, a.component)
    _emit({**curve, "component": a.component, "plot": str(plot)})


def cmd_visualize(ctx, a):
    ds, ext = load_dataset(a.data), _ext(a.ext)
    if a.max_ids:
        keep = np.flatnonzero(ds.labels < a.max_ids)
        ds = ds.subset(keep)
    clean = ext_forward(ds.images, ext)
    if a.gen:
        after, title = noised_features(clean, freeze(load_params(a.gen))), "noised features"
    elif a.key:
        after, title = obfuscate(clean, key_load(a.key)), "obfuscated features"
    else:
        raise UsageError("visualize needs --key or --gen")
    out = ctx.out_path(a.out, f"figures/projection-s{ctx.seed}.png")
    res = emit_projection_plot(clean, after, np.asarray(ds.names)[ds.labels], out, ctx.seed,
                               ("original features", title))
    _emit({"plot": str(out), "method": res["method"], "samples": len(ds)})


def cmd_report(ctx, a):
    recs = load_runs(a.runs)
    rows = report_rows(recs)
    print(format_table(rows, summarize(rows)))
    if a.json:
        Path(a.json).write_text(json.dumps({"rows": rows, "summary": summarize(rows)}, indent=1))


def cmd_bench(ctx, a):
    fn = {"xnn": bench.run_xnn_benchmark, "xnnd": bench.run_xnnd_benchmark}[a.which]
    seeds = a.seeds if a.seeds is not None else list(ctx.cfg.seeds)
    recs = []
    for s in seeds:
        for r in fn(ctx.cfg, s):
            write_metrics(r, ctx.root / "metrics" / f"{r.run_id}-{r.condition}-{ctx.cfg.config_hash()}.json")
            recs.append(r)
            if ctx.cfg.output.plots and r.loss_curves:
                plot_loss_curves({k: v for k, v in r.loss_curves.items() if k.endswith("_loss")},
                                 ctx.out_path(None, f"figures/{r.run_id}-{r.condition}-loss.png"))
    rows = report_rows(recs)
    print(format_table(rows, summarize(rows)))


# ---------------------------------------------------------------- parser

def build_parser(prog="xnn") -> argparse.ArgumentParser:
    p = _Parser(prog=prog, description="Keyed feature obfuscation and noise-encoder defenses "
                                       "against identity leakage, with attacks and baselines.")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser, metavar="command")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--out-root", help="output directory (default $XNN_OUTPUT_ROOT or ./runs)")
        sp.set_defaults(fn=fn)
        return sp

    def training(sp):
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        return sp

    sp = add("keygen", cmd_keygen, "generate an obfuscation key file")
    sp.add_argument("--patches", type=int, default=16)
    sp.add_argument("--dim", type=int, default=64)
    sp.add_argument("--kind", choices=["orthogonal", "gaussian"], default="orthogonal")
    sp.add_argument("--out")

    sp = add("synth-data", cmd_synth_data, "generate a synthetic identity dataset")
    sp.add_argument("--num-ids", type=int)
    sp.add_argument("--images-per-id", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--role", default="owner", choices=["owner", "public", "attacker"])
    sp.add_argument("--prefix", default="id")
    sp.add_argument("--test-ids", type=int, help="also write an identity-disjoint train/test split")
    sp.add_argument("--test-images-per-id", type=int)
    sp.add_argument("--out")

    sp = add("ingest", cmd_ingest, "read an image folder root/<identity>/<image> into a dataset file")
    sp.add_argument("folder")
    sp.add_argument("--role", default="owner")
    sp.add_argument("--out")

    sp = training(add("pretrain-ext", cmd_pretrain_ext, "pretrain and freeze an ExtNet on public data"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--layer-norm-tail", action="store_true")
    sp.add_argument("--out")

    sp = add("build-obf", cmd_build_obf, "owner side: obfuscated features + anonymous labels")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--map-seed", type=int, default=0)
    sp.add_argument("--map-out")
    sp.add_argument("--out")

    sp = training(add("train-rec", cmd_train_rec, "cloud side: train a RecNet on an obfuscated dataset"))
    sp.add_argument("--obf", required=True)
    sp.add_argument("--rec-init", choices=["random", "pretrained-public"], default="random")
    sp.add_argument("--freeze-rec", action="store_true", help="skip fitting on the obfuscated data")
    sp.add_argument("--public", help="public dataset for --rec-init pretrained-public")
    sp.add_argument("--ext", help="ExtNet for --rec-init pretrained-public")
    sp.add_argument("--out")

    sp = add("eval-utility", cmd_eval_utility, "identification accuracy on held-out identities")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--rec", required=True)
    sp.add_argument("--key", help="omit for the undefended pipeline")
    sp.add_argument("--condition", default="xnn")

    sp = training(add("attack-expectation", cmd_attack_expectation, "expectation recognition attack"))
    sp.add_argument("--public", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--key", help="owner key used to transmit the probes; omit for no defense")
    sp.add_argument("--distractors", help="extra one-image identities for the gallery")
    sp.add_argument("--gallery-mode", choices=["clean", "obfuscated"], default="clean")
    sp.add_argument("--condition", default="xnn")

    sp = training(add("attack-blackbox", cmd_attack_blackbox, "query-only surrogate attack on a feature generator"))
    sp.add_argument("--test", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--attacker", required=True)
    sp.add_argument("--gen", help="noise encoder; omit to attack the clean features")
    sp.add_argument("--query-budget", type=int)
    sp.add_argument("--condition", default="xnnd")

    sp = training(add("xnnd-train-gen", cmd_xnnd_train_gen, "adversarially train the noise encoder"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True, help="ExtNet (normally with --layer-norm-tail)")
    sp.add_argument("--teacher", help="RecNet trained on clean features; trained here if omitted")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--game-epochs", type=int)
    sp.add_argument("--out")

    sp = training(add("xnnd-distill", cmd_xnnd_distill, "distill a student RecNet on noised features"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--gen", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--init", help="start from this RecNet (e.g. the game's adversary)")
    sp.add_argument("--ce-weight", type=float)
    sp.add_argument("--out")

    sp = training(add("xnnd-eval", cmd_xnnd_eval, "utility (and optional black-box ASR) of a server model"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--student", required=True)
    sp.add_argument("--gen")
    sp.add_argument("--attacker")

    sp = training(add("baseline", cmd_baseline, "vanilla or InstaHide comparison condition"))
    sp.add_argument("kind", choices=["vanilla", "instahide"])
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--k", type=int, default=2)
    sp.add_argument("--threshold", type=float)

    sp = training(add("sweep-layers", cmd_sweep_layers, "utility vs. number of blocks"))
    sp.add_argument("--component", choices=["extnet", "recnet"], default="extnet")
    sp.add_argument("--range", type=_layers, default=[1, 2, 3, 4])
    sp.add_argument("--plot")

    sp = add("visualize", cmd_visualize, "2-D projection of original vs. transmitted features")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ext", required=True)
    sp.add_argument("--key")
    sp.add_argument("--gen")
    sp.add_argument("--max-ids", type=int, default=10)
    sp.add_argument("--out")

    sp = add("report", cmd_report, "utility/ASR table over metrics records")
    sp.add_argument("--runs", required=True)
    sp.add_argument("--json", help="also write rows and summary as JSON")

    sp = training(add("bench", cmd_bench, "run a full seeded desk benchmark"))
    sp.add_argument("which", choices=["xnn", "xnnd"])
    sp.add_argument("--seeds", type=_seed_list)
    return p


def main(argv=None, prog="xnn") -> int:
    parser = build_parser(prog)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        ctx = Ctx(args)
        args.fn(ctx, args)
    except UsageError as exc:
        print(f"{prog}: error: {exc}", file=sys.stderr)
        return 2
    except (XNNError, OSError, ValueError) as exc:
        print(f"{prog}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_xnnd(argv=None) -> int:
    """``xnn-d train-gen|distill|eval ...`` maps onto the ``xnnd-*`` commands."""
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] in ("train-gen", "distill", "eval"):
        argv[0] = "xnnd-" + argv[0]
    return main(argv, prog="xnn-d")


def entry() -> None:
    sys.exit(main())


def entry_xnnd() -> None:
    sys.exit(main_xnnd())


if __name__ == "__main__":
    entry()
