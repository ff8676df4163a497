"""Acceptance suite: one PASS/FAIL line per criterion (see the summary at the end of the run).

Aggregation over seeds: thresholds apply to the 5-seed mean; strict orderings need the mean
paired difference to exceed 3 standard errors; chance-level bounds use the binomial sigma
of all probes pooled across seeds.
"""
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from xnn import bench
from xnn.attacks import Gallery, identity_leakage, nearest_cosine, random_guess
from xnn.baselines import sample_coefficients
from xnn.cli import main
from xnn.config import ExperimentConfig
from xnn.errors import ChecksumError, KeyFileError
from xnn.models import RecNet, RecNetConfig, build
from xnn.obfuscation import invert_obfuscation, key_from_bytes, keygen, obfuscate
from xnn.report import MetricsRecord, read_metrics

pytestmark = pytest.mark.slow
SEEDS = (0, 1, 2, 3, 4)
CFG = ExperimentConfig()


def _by_cond(records):
    out = {}
    for r in records:
        out.setdefault(r.condition, []).append(r)
    return out


@pytest.fixture(scope="session")
def xnn_runs():
    t0 = time.perf_counter()
    recs = [r for s in SEEDS for r in bench.run_xnn_benchmark(CFG, s)]
    return _by_cond(recs), time.perf_counter() - t0


@pytest.fixture(scope="session")
def xnnd_runs():
    t0 = time.perf_counter()
    recs = [r for s in SEEDS for r in bench.run_xnnd_benchmark(CFG, s)]
    return _by_cond(recs), time.perf_counter() - t0


def util(runs, cond):
    return np.array([r.utility for r in runs[cond]])


def asr(runs, cond):
    return np.array([r.asr for r in runs[cond]])


def _r(xs):
    return [round(float(x), 3) for x in xs]


def beats(a, b):
    """Mean of the paired seed differences a - b and whether it exceeds 3 standard errors."""
    d = np.asarray(a) - np.asarray(b)
    se = d.std(ddof=1) / math.sqrt(len(d))
    return d.mean(), d.mean() > 3 * se, se


# ---------------------------------------------------------------- 1

def test_c1_obfuscation_algebra(criterion, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    ok, worst_rt, worst_iso = True, 0.0, 0.0
    for i in range(100):
        P, D = int(rng.integers(1, 20)), int(rng.integers(1, 40))
        key = keygen(i, P, D)
        ok &= sorted(key.perm.tolist()) == list(range(P))
        ok &= np.allclose(key.matrix.T @ key.matrix, np.eye(D), atol=1e-10)
        a, b = rng.standard_normal((2, P, D))
        worst_rt = max(worst_rt, np.abs(invert_obfuscation(obfuscate(a, key), key) - a).max())
        rel = abs(np.linalg.norm(obfuscate(a, key) - obfuscate(b, key)) - np.linalg.norm(a - b))
        worst_iso = max(worst_iso, rel / np.linalg.norm(a - b))
    key = keygen(7, 16, 64)
    raw = key.to_bytes()
    ok &= key_from_bytes(raw) == key and key_from_bytes(raw).to_bytes() == raw
    tampered = bytearray(raw)
    tampered[40] ^= 1
    try:
        key_from_bytes(bytes(tampered))
        ok = False
    except ChecksumError:
        pass
    try:
        key_from_bytes(raw[:-9])
        ok = False
    except KeyFileError:
        pass
    dt = time.perf_counter() - t0
    criterion("C1 obfuscation algebra", ok and worst_rt <= 1e-10 and worst_iso <= 1e-5 and dt < 10,
              f"round-trip {worst_rt:.1e} (<=1e-10), isometry rel {worst_iso:.1e} (<=1e-5), "
              f"key file exact + tamper detected={ok}, {dt:.1f}s (<10s)")


# ---------------------------------------------------------------- 2

def test_c2_leakage_metric(criterion):
    t0 = time.perf_counter()
    n = 20
    ids = np.array([f"p{i}" for i in range(n)])
    gallery = Gallery(ids, np.eye(n))
    probes = np.arange(n).repeat(50)
    oracle = identity_leakage(probes, ids[probes], gallery, lambda p: p, "oracle").leak
    probe_ids = ids[np.random.default_rng(1).integers(0, n, 1000)]
    rand = identity_leakage(np.zeros((1000, 1)), probe_ids, gallery, random_guess(n, 2), "random")
    g3 = Gallery(np.array(["a", "b", "c"]), np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    hand = identity_leakage(np.array([[0.9, 0.1], [0.1, 0.9], [0.8, 0.2]]), ["a", "b", "c"], g3,
                            nearest_cosine(g3.entries)).leak
    dt = time.perf_counter() - t0
    ok = oracle == 1.0 and abs(rand.leak - 1 / n) <= 3 * rand.sigma() and hand == pytest.approx(2 / 3) and dt < 10
    criterion("C2 leakage metric", ok, f"oracle {oracle}, random {rand.leak:.3f} vs 1/N {1 / n:.3f} "
              f"(3 sigma {3 * rand.sigma():.3f}), hand-built {hand:.4f} (2/3), {dt:.1f}s")


# ---------------------------------------------------------------- 3

def test_c3_xnn_benchmark(criterion, xnn_runs):
    runs, dt = xnn_runs
    van, xnn = util(runs, "vanilla"), util(runs, "xnn")
    leak_van = [r.leakage for r in runs["vanilla"]]
    leak_xnn = [r.leakage for r in runs["xnn"]]
    chance = leak_van[0]["chance"]
    a_van = asr(runs, "vanilla").mean()
    hits = sum(sum(lk["hits"]) for lk in leak_xnn)
    probes = sum(lk["n_probes"] for lk in leak_xnn)
    a_xnn = hits / probes
    sigma = math.sqrt(chance * (1 - chance) / probes)
    ok = {
        "vanilla util >= 0.90": van.mean() >= 0.90,
        "xnn util >= vanilla - 0.05": xnn.mean() >= van.mean() - 0.05,
        "vanilla ASR >= 10/N": a_van >= 10 * chance,
        "xnn ASR <= 2/N + 3 sigma": a_xnn <= 2 * chance + 3 * sigma,
        "runtime < 10 min": dt < 600,
    }
    criterion("C3 desk XNN benchmark", all(ok.values()),
              f"util vanilla {van.mean():.3f}, xnn {xnn.mean():.3f}; ASR vanilla {a_van:.3f} (>= {10 * chance:.2f}), "
              f"xnn {a_xnn:.4f} (<= {2 * chance + 3 * sigma:.4f}, {probes} probes); {dt:.0f}s; "
              f"failed: {[k for k, v in ok.items() if not v]}")


# ---------------------------------------------------------------- 4

def test_c4_ablation_ordering(criterion, xnn_runs):
    runs, _ = xnn_runs
    d_ext, sig_ext, _ = beats(util(runs, "vanilla"), util(runs, "random-ext"))
    d_rec, sig_rec, _ = beats(util(runs, "xnn"), util(runs, "pretrain-rec"))
    ok = d_ext >= 0.10 and sig_ext and sig_rec
    criterion("C4 ablation ordering", ok,
              f"pretrained vs random ExtNet +{d_ext:.3f} (>= 0.10, 3SE {sig_ext}); "
              f"trained vs frozen public RecNet +{d_rec:.3f} (3SE {sig_rec}); per seed xnn "
              f"{_r(util(runs, 'xnn'))} frozen {_r(util(runs, 'pretrain-rec'))} random-ext {_r(util(runs, 'random-ext'))}")


# ---------------------------------------------------------------- 5

def test_c5_xnnd_benchmark(criterion, xnnd_runs):
    runs, dt = xnnd_runs
    a_base, a_x = asr(runs, "xnnd-baseline"), asr(runs, "xnnd")
    u_base, u_x = util(runs, "xnnd-baseline"), util(runs, "xnnd")
    ok = a_x.mean() <= 0.5 * a_base.mean() and u_x.mean() >= u_base.mean() - 0.02 and dt < 600
    criterion("C5 XNN-d benchmark", ok,
              f"black-box ASR {a_x.mean():.3f} vs baseline {a_base.mean():.3f} (ratio {a_x.mean() / a_base.mean():.2f}"
              f" <= 0.5); util {u_x.mean():.3f} vs {u_base.mean():.3f} (>= -0.02); {dt:.0f}s (<600s); "
              f"per seed ASR {_r(a_x)} vs {_r(a_base)}, util {_r(u_x)} vs {_r(u_base)}")


def test_c5_attack_ordering(criterion, xnn_runs, xnnd_runs):
    runs, _ = xnn_runs
    druns, _ = xnnd_runs
    _, s1, _ = beats(asr(runs, "vanilla"), asr(runs, "xnn"))
    _, s2, _ = beats(asr(druns, "xnnd-baseline"), asr(druns, "xnnd"))
    criterion("C5 attack strength ordering", s1 and s2,
              f"ASR vanilla > xnn at 3SE: {s1}; ASR baseline FG > XNN-d FG at 3SE: {s2}")


# ---------------------------------------------------------------- 6

def test_c6_baseline_ordering(criterion, xnn_runs):
    runs, _ = xnn_runs
    d1, s1, _ = beats(util(runs, "xnn"), util(runs, "instahide-k2"))
    d2, s2, _ = beats(util(runs, "instahide-k2"), util(runs, "instahide-k3"))
    d3, s3, _ = beats(asr(runs, "instahide-k2"), asr(runs, "xnn"))
    rng = np.random.default_rng(0)
    lam = np.array([sample_coefficients(k, 0.65, rng) for k in (2, 3) for _ in range(10_000)], dtype=object)
    coef_ok = all(abs(sum(x) - 1) <= 1e-9 and max(x) <= 0.65 for x in lam)
    criterion("C6 baseline ordering", s1 and s2 and s3 and coef_ok,
              f"util xnn-ih2 +{d1:.3f} ({s1}), ih2-ih3 +{d2:.3f} ({s2}); ASR ih2-xnn +{d3:.3f} ({s3}); "
              f"2x10^4 coefficient draws valid: {coef_ok}")


# ---------------------------------------------------------------- 7

def test_c7_layer_sweep(criterion, xnn_runs, tmp_path, capsys):
    runs, _ = xnn_runs
    code = main(["sweep-layers", "--range", "1..4", "--component", "extnet", "--out-root", str(tmp_path)])
    out = json.loads(capsys.readouterr().out) if code == 0 else {}
    curve = out.get("utility", [])
    gap = util(runs, "vanilla").mean() - util(runs, "instahide-k2").mean()
    spread = max(curve) - min(curve) if curve else float("inf")
    ok = code == 0 and len(curve) == 4 and Path(out.get("plot", "")).is_file() and spread < gap
    criterion("C7 layer sweep", ok, f"utility {[round(u, 3) for u in curve]} spread {spread:.3f} "
              f"< vanilla-InstaHide gap {gap:.3f}")


# ---------------------------------------------------------------- 8

def test_c8_gradient_check(criterion):
    cfg = RecNetConfig(embed_dim=4, num_blocks=1, num_classes=2, embedding_dim=2, num_heads=1, mlp_ratio=1.0)
    rec = build(RecNet, cfg, 0).double()
    n_params = sum(p.numel() for p in rec.parameters())
    x = torch.randn(3, 5, 4, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    y = torch.tensor([0, 1, 0])

    def loss():
        return F.cross_entropy(rec(x)[1], y)

    rec.zero_grad()
    loss().backward()
    analytic = torch.cat([p.grad.reshape(-1) for p in rec.parameters()])
    numeric = []
    with torch.no_grad():
        for p in rec.parameters():
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + 1e-6
                up = loss().item()
                flat[i] = old - 1e-6
                down = loss().item()
                flat[i] = old
                numeric.append((up - down) / 2e-6)
    rel = ((analytic - torch.tensor(numeric, dtype=torch.float64)).norm() / analytic.norm()).item()
    criterion("C8 gradient check", n_params <= 200 and rel <= 1e-4, f"{n_params} params, relative error {rel:.2e}")


def _cli_bench(which, out_root):
    # output root via the environment so the config (and its hash) matches the in-process run
    env = {**os.environ, "XNN_OUTPUT_ROOT": str(out_root)}
    subprocess.run([sys.executable, "-m", "xnn.cli", "bench", which, "--seeds", "0"],
                   check=True, capture_output=True, text=True, env=env)
    return sorted((read_metrics(p) for p in (Path(out_root) / "metrics").glob("*.json")),
                  key=lambda r: r.condition)


def test_c8_determinism(criterion, xnn_runs, xnnd_runs, tmp_path):
    """Seed 0 of both benchmarks rerun in a fresh process must reproduce the metrics JSON."""
    first = [r for runs in (xnn_runs[0], xnnd_runs[0]) for rs in runs.values() for r in rs
             if r.seeds["seed"] == 0]
    second = _cli_bench("xnn", tmp_path / "a") + _cli_bench("xnnd", tmp_path / "b")
    a = {r.condition: r.canonical() for r in first}
    b = {r.condition: r.canonical() for r in second}
    same = a == b
    diff = [c for c in a if a[c] != b.get(c)]
    assert all(isinstance(r, MetricsRecord) for r in second)
    criterion("C8 seeded determinism", same, f"{len(a)} records identical apart from wall time; differing: {diff}")


# ---------------------------------------------------------------- benchmark-level properties

def test_xnnd_game_and_distillation_effects(xnnd_runs):
    runs, _ = xnnd_runs
    m = [r.metrics for r in runs["xnnd"]]
    # the noise costs a RecNet at least 20 points of training accuracy
    gap = np.mean([x["teacher_acc_clean"] - x["adversary_acc_mixed"] for x in m])
    assert gap >= 0.20
    # distillation does not hurt the student relative to plain CE on the same features
    assert np.mean(util(runs, "xnnd")) >= np.mean([x["nodistill_utility"] for x in m])
    cap = CFG.xnnd.mix_alpha * CFG.xnnd.beta
    assert all(max(x["game"]["noise_ratio"]) <= cap + 1e-5 for x in m)


def test_table_orderings(xnn_runs):
    runs, _ = xnn_runs
    d, _, se = beats(util(runs, "vanilla"), util(runs, "xnn"))
    assert d > -3 * se  # vanilla >= xnn, non-strict
    for k in ("instahide-k2", "instahide-k3"):
        assert beats(asr(runs, k), asr(runs, "xnn"))[1]
        assert beats(asr(runs, "vanilla"), asr(runs, k))[1]
    assert all(r.metrics["attacker_keys"] > 1 for r in runs["xnn"])
