"""Metrics documents, the cross-run report table, and static figures."""
from __future__ import annotations

import json
import math
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import LeakageReport
from .errors import InvalidArgumentError, MetricsError

SCHEMA = "xnn-metrics/1"


@dataclass
class MetricsRecord:
    """One condition of one run. ``leakage`` holds a LeakageReport as JSON."""

    run_id: str
    condition: str
    config_hash: str
    seeds: dict
    utility: float | None = None
    leakage: dict | None = None
    metrics: dict = field(default_factory=dict)
    loss_curves: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    wall_time: float = 0.0
    schema: str = SCHEMA

    def to_json(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time")
        return d

    def canonical(self) -> str:
        """Deterministic serialization without wall-clock fields."""
        return json.dumps(self.to_json(timing=False), sort_keys=True)

    @classmethod
    def from_json(cls, d: dict) -> "MetricsRecord":
        if d.get("schema") != SCHEMA:
            raise MetricsError(f"unsupported metrics schema {d.get('schema')!r}")
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise MetricsError(f"unknown metrics fields: {sorted(unknown)}")
        return cls(**d)

    @property
    def asr(self) -> float | None:
        return None if self.leakage is None else self.leakage["leak"]


def write_metrics(record: MetricsRecord, path) -> Path:
    """Atomically create ``path``. Records are append-only: an existing file is never replaced."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(record.to_json(), fh, indent=1, sort_keys=True)
        os.link(tmp, path)  # fails if the target exists
    finally:
        os.unlink(tmp)
    return path


def read_metrics(path) -> MetricsRecord:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MetricsError(f"{path}: not valid JSON ({exc})") from exc
    return MetricsRecord.from_json(d)


def load_runs(root) -> list:
    """Every metrics record under ``root`` (recursively), ordered by run id and condition."""
    root = Path(root)
    if not root.exists():
        raise InvalidArgumentError(f"no such directory: {root}")
    recs = []
    for p in sorted(root.rglob("*.json")):
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(d, dict) and d.get("schema") == SCHEMA:
            recs.append(MetricsRecord.from_json(d))
    return sorted(recs, key=lambda r: (r.run_id, r.condition))


def recomputed_leak(leakage: dict) -> float:
    """Leak recomputed from the per-probe hit list; must match the stored value."""
    rep = LeakageReport.from_json(leakage)
    if len(rep.hits) != rep.n_probes:
        raise MetricsError(f"{rep.attack_name}: {len(rep.hits)} hits stored for {rep.n_probes} probes")
    value = float(np.mean(rep.hits)) if rep.hits else 0.0
    if not math.isclose(value, rep.leak, rel_tol=0, abs_tol=1e-12):
        raise MetricsError(f"{rep.attack_name}: stored leak {rep.leak} != {value} from hits")
    return value


def report_rows(records) -> list:
    rows = []
    for r in records:
        asr = chance = probes = None
        if r.leakage is not None:
            asr = recomputed_leak(r.leakage)
            chance, probes = r.leakage["chance"], r.leakage["n_probes"]
        rows.append({"run": r.run_id, "condition": r.condition, "seed": r.seeds.get("seed"),
                     "utility": r.utility, "asr": asr, "chance": chance, "probes": probes})
    return rows


def summarize(rows) -> list:
    """Mean and sample std per condition across runs."""
    out = []
    for cond in dict.fromkeys(r["condition"] for r in rows):
        grp = [r for r in rows if r["condition"] == cond]
        entry = {"condition": cond, "runs": len(grp)}
        for k in ("utility", "asr"):
            vals = [r[k] for r in grp if r[k] is not None]
            entry[k] = float(np.mean(vals)) if vals else None
            entry[k + "_std"] = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
        out.append(entry)
    return out


def _fmt(v, pct=True):
    if v is None:
        return "-"
    return f"{100 * v:.2f}" if pct else str(v)


def format_table(rows, summary=None) -> str:
    w = max([4] + [len(str(r["run"])) for r in rows])
    head = f"{'run':<{w}} {'condition':<16} {'seed':>4} {'Utils(^)':>9} {'ASR(v)':>8} {'chance':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['run']:<{w}} {r['condition']:<16} {_fmt(r['seed'], False):>4} "
                     f"{_fmt(r['utility']):>9} {_fmt(r['asr']):>8} {_fmt(r['chance']):>7}")
    if summary:
        lines += ["", f"{'condition':<16} {'runs':>4} {'Utils(^)':>16} {'ASR(v)':>16}"]
        for s in summary:
            def ms(k):
                if s[k] is None:
                    return "-"
                sd = "" if s[k + "_std"] is None else f" +- {100 * s[k + '_std']:.2f}"
                return f"{100 * s[k]:.2f}{sd}"
            lines.append(f"{s['condition']:<16} {s['runs']:>4} {ms('utility'):>16} {ms('asr'):>16}")
    return "\n".join(lines)


# ---------------------------------------------------------------- figures

def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def project_2d(features, seed: int = 0, method: str | None = None):
    """2-D coordinates: t-SNE from 50 samples up, PCA below (with a warning)."""
    from sklearn.decomposition import PCA
    from sklearn.manifold import TSNE

    x = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if method is None:
        method = "tsne" if len(x) >= 50 else "pca"
        if method == "pca":
            warnings.warn(f"only {len(x)} samples; using PCA instead of t-SNE")
    if method == "tsne":
        perplexity = min(30.0, (len(x) - 1) / 3)
        coords = TSNE(2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(x)
    elif method == "pca":
        coords = PCA(2, random_state=seed).fit_transform(x)
    else:
        raise InvalidArgumentError(f"unknown projection {method!r}")
    return coords, method


def emit_projection_plot(features_before, features_after, labels, out_path, seed: int = 0,
                         titles=("original features", "transmitted features")) -> dict:
    """Side-by-side scatter of two feature sets coloured by identity, one shared legend.

    Returns the projected coordinates so callers can check cluster structure.
    """
    labels = np.asarray(labels)
    if len(features_before) != len(labels) or len(features_after) != len(labels):
        raise InvalidArgumentError("features and labels differ in length")
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2:
        raise InvalidArgumentError("need at least two identities to plot")
    if counts.min() < 5:
        warnings.warn("fewer than 5 samples for some identity; clusters may be unreadable")
    before, method = project_2d(features_before, seed)
    after, _ = project_2d(features_after, seed, method)
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.6))
    cmap = plt.get_cmap("tab20", len(ids))
    handles = []
    for ax, coords, title in zip(axes, (before, after), titles):
        for j, c in enumerate(ids):
            m = labels == c
            h = ax.scatter(coords[m, 0], coords[m, 1], s=10, color=cmap(j), label=str(c))
            if ax is axes[0]:
                handles.append(h)
        ax.set_title(f"{title} ({method})")
        ax.set_xticks([])
        ax.set_yticks([])
    fig.legend(handles=handles, loc="center right", fontsize=7, title="identity")
    fig.tight_layout(rect=(0, 0, 0.88, 1))
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return {"before": before, "after": after, "method": method}


def plot_loss_curves(curves: dict, out_path, ylabel: str = "loss") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, ys in curves.items():
        ax.plot(np.arange(1, len(ys) + 1), ys, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)


def plot_layer_sweep(layers, series: dict, out_path, component: str = "extnet") -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for name, ys in series.items():
        ax.plot(layers, [100 * y for y in ys], marker="o", label=name)
    ax.set_xlabel(f"{component} blocks")
    ax.set_ylabel("utility (%)")
    ax.set_xticks(list(layers))
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
