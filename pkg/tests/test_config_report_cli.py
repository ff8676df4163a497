import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from xnn.attacks import LeakageReport
from xnn.cli import main, main_xnnd
from xnn.config import ExperimentConfig, dump_config, from_dict, load_config
from xnn.errors import ConfigError, MetricsError
from xnn.obfuscation import key_load
from xnn.report import (MetricsRecord, emit_projection_plot, format_table, load_runs, project_2d, read_metrics,
                        report_rows, summarize, write_metrics)


# ---------------------------------------------------------------- config

def test_defaults_and_round_trip(tmp_path):
    cfg = ExperimentConfig()
    assert cfg.train.batch_size == 64 and cfg.extnet.embed_dim == 64
    p = tmp_path / "c.yaml"
    p.write_text(dump_config(cfg))
    back = load_config(p)
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_strict_fields_and_types(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"train": {"bogus": 1}})
    with pytest.raises(ConfigError):
        from_dict({"nosuch": {}})
    with pytest.raises(ConfigError):
        from_dict({"train": {"epochs": "ten"}})
    with pytest.raises(ConfigError):
        from_dict({"train": {"lr": -1.0}})
    (tmp_path / "bad.yaml").write_text("train: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_partial_section_keeps_other_defaults():
    cfg = from_dict({"train": {"epochs": 3}, "xnnd": {"beta": 2}})
    assert cfg.train.epochs == 3 and cfg.train.batch_size == 64
    assert cfg.xnnd.beta == 2.0 and isinstance(cfg.xnnd.beta, float)
    assert cfg.config_hash() != ExperimentConfig().config_hash()


def test_override_precedence(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 7\n  batch_size: 32\n")
    cfg = load_config(p).override({"train.epochs": 2, "train.batch_size": None})
    assert (cfg.train.epochs, cfg.train.batch_size) == (2, 32)
    with pytest.raises(ConfigError):
        cfg.override({"train.nope": 1})


# ---------------------------------------------------------------- metrics

def _record(cond, seed=0, hits=(True, False, True, True)):
    leak = LeakageReport(float(np.mean(hits)), 4, 0.25, "expectation", len(hits), list(hits))
    return MetricsRecord(f"run-s{seed}", cond, "abc", {"seed": seed}, 0.9, leak.to_json(),
                         {"x": 1}, {"rec_loss": [2.0, 1.0]}, {}, wall_time=1.5)


def test_metrics_round_trip(tmp_path):
    rec = _record("xnn")
    path = write_metrics(rec, tmp_path / "m" / "a.json")
    back = read_metrics(path)
    assert back == rec and back.asr == 0.75
    with pytest.raises(FileExistsError):
        write_metrics(rec, path)
    assert sorted(p.name for p in path.parent.iterdir()) == ["a.json"]


def test_canonical_ignores_wall_time():
    a, b = _record("xnn"), _record("xnn")
    b.wall_time = 99.0
    assert a.canonical() == b.canonical() and a != b


def test_metrics_schema_checked(tmp_path):
    d = _record("xnn").to_json()
    with pytest.raises(MetricsError):
        MetricsRecord.from_json({**d, "schema": "other/9"})
    with pytest.raises(MetricsError):
        MetricsRecord.from_json({**d, "extra": 1})
    (tmp_path / "x.json").write_text("{")
    with pytest.raises(MetricsError):
        read_metrics(tmp_path / "x.json")


def test_report_one_row_per_record(tmp_path):
    for i, cond in enumerate(["vanilla", "xnn", "xnnd"]):
        write_metrics(_record(cond, seed=i), tmp_path / f"{i}.json")
    (tmp_path / "notes.json").write_text('{"unrelated": true}')
    rows = report_rows(load_runs(tmp_path))
    assert len(rows) == 3 and {r["condition"] for r in rows} == {"vanilla", "xnn", "xnnd"}
    assert all(r["asr"] == 0.75 for r in rows)
    table = format_table(rows, summarize(rows))
    assert "75.00" in table and "90.00" in table


def test_report_recomputes_leak():
    rec = _record("xnn")
    rec.leakage["hits"] = [True]
    with pytest.raises(MetricsError):
        report_rows([rec])
    rec = _record("xnn")
    rec.leakage["leak"] = 0.1
    with pytest.raises(MetricsError):
        report_rows([rec])


def test_summary_mean_and_std():
    rows = [{"condition": "a", "utility": u, "asr": None, "run": "r", "seed": 0, "chance": None}
            for u in (0.5, 0.7)]
    s = summarize(rows)[0]
    assert s["utility"] == pytest.approx(0.6) and s["utility_std"] == pytest.approx(np.std([0.5, 0.7], ddof=1))
    assert s["asr"] is None


# ---------------------------------------------------------------- figures

def _clusters(n_ids=5, per=12, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_ids, 40)) * 6
    labels = np.repeat(np.arange(n_ids), per)
    return centers[labels] + rng.standard_normal((len(labels), 40)), labels


def test_projection_deterministic_and_clustered(tmp_path):
    x, y = _clusters()
    scrambled = np.random.default_rng(1).standard_normal(x.shape)
    out = emit_projection_plot(x, scrambled, y, tmp_path / "p.png", seed=3)
    again = emit_projection_plot(x, scrambled, y, tmp_path / "q.png", seed=3)
    assert (tmp_path / "p.png").stat().st_size > 0 and out["method"] == "tsne"
    np.testing.assert_array_equal(out["before"], again["before"])

    def ratio(c):
        cent = np.array([c[y == k].mean(0) for k in range(5)])
        within = np.mean([np.linalg.norm(c[y == k] - cent[k], axis=1).mean() for k in range(5)])
        between = np.mean([np.linalg.norm(a - b) for i, a in enumerate(cent) for b in cent[i + 1:]])
        return within / between

    assert ratio(out["before"]) < 0.5 < ratio(out["after"])


def test_projection_small_set_falls_back_to_pca():
    x, _ = _clusters(2, 5)
    with pytest.warns(UserWarning, match="PCA"):
        coords, method = project_2d(x)
    assert method == "pca" and coords.shape == (10, 2)


# ---------------------------------------------------------------- cli

def test_cli_keygen_writes_key(tmp_path, capsys):
    code = main(["keygen", "--seed", "3", "--patches", "4", "--dim", "8", "--out-root", str(tmp_path)])
    assert code == 0
    info = json.loads(capsys.readouterr().out)
    key = key_load(info["key"])
    assert key.fingerprint() == info["fingerprint"] and key.perm.shape == (4,)


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["no-such-command"]) == 2
    assert main(["keygen", "--patches", "x"]) == 2
    assert main(["eval-utility", "--data", str(tmp_path / "missing.npz"), "--ext", "e", "--rec", "r",
                 "--out-root", str(tmp_path)]) == 1
    bad = tmp_path / "c.yaml"
    bad.write_text("train: {bogus: 1}\n")
    assert main(["keygen", "--config", str(bad), "--out-root", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert "bogus" in err


def test_cli_report_and_alias(tmp_path, capsys):
    write_metrics(_record("xnn"), tmp_path / "metrics" / "a.json")
    out = tmp_path / "report.json"
    assert main(["report", "--runs", str(tmp_path), "--json", str(out)]) == 0
    assert "75.00" in capsys.readouterr().out
    rows = json.loads(out.read_text())["rows"]
    assert len(rows) == 1 and rows[0]["asr"] == 0.75
    assert main_xnnd(["nope"]) == 2
    assert main_xnnd(["eval", "--help"]) == 0


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "xnn.cli", "keygen", "--patches", "4", "--dim", "4",
                           "--out-root", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr


def test_cli_owner_cloud_flow_with_frozen_public_rec(tmp_path, capsys):
    def run(*args):
        assert main([*args, "--out-root", str(tmp_path)]) == 0
        return json.loads(capsys.readouterr().out)

    d = tmp_path
    run("synth-data", "--seed", "1", "--num-ids", "6", "--images-per-id", "6", "--test-ids", "2",
        "--test-images-per-id", "4", "--out", str(d / "own.npz"))
    run("synth-data", "--seed", "2", "--num-ids", "5", "--images-per-id", "6", "--role", "public",
        "--out", str(d / "pub.npz"))
    run("pretrain-ext", "--data", str(d / "pub.npz"), "--epochs", "1", "--out", str(d / "ext.npz"))
    run("keygen", "--seed", "4", "--out", str(d / "k.xnnk"))
    run("build-obf", "--data", str(d / "own-train.npz"), "--ext", str(d / "ext.npz"), "--key", str(d / "k.xnnk"),
        "--out", str(d / "o.xnno"))
    frozen = run("train-rec", "--obf", str(d / "o.xnno"), "--freeze-rec", "--rec-init", "pretrained-public",
                 "--public", str(d / "pub.npz"), "--ext", str(d / "ext.npz"), "--epochs", "1")
    assert frozen["frozen"] and frozen["rec_init"] == "pretrained-public"
    tuned = run("train-rec", "--obf", str(d / "o.xnno"), "--rec-init", "pretrained-public",
                "--public", str(d / "pub.npz"), "--ext", str(d / "ext.npz"), "--epochs", "1")
    out = run("eval-utility", "--data", str(d / "own-test.npz"), "--ext", str(d / "ext.npz"),
              "--key", str(d / "k.xnnk"), "--rec", frozen["rec"])
    assert 0.0 <= out["utility"] <= 1.0 and Path(tuned["rec"]).is_file()
    assert main(["train-rec", "--obf", str(d / "o.xnno"), "--rec-init", "pretrained-public",
                 "--out-root", str(tmp_path)]) == 2
