"""Small ViT-style feature extractor (ExtNet), recognition network (RecNet) and the
shared SGD/Nesterov + cosine-annealing training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, InvalidArgumentError, NumericError, ShapeError, TrainingDiverged

log = logging.getLogger(__name__)

torch.set_num_threads(1)


@dataclass(frozen=True)
class ExtNetConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    use_layer_norm_tail: bool = False

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise InvalidArgumentError("image_size must be divisible by patch_size")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class RecNetConfig:
    embed_dim: int = 64
    num_blocks: int = 2
    num_classes: int = 40
    embedding_dim: int = 32
    num_heads: int = 4
    mlp_ratio: float = 2.0
    position_embedding: bool = False
    num_patches: int = 16  # only used when position_embedding is on
    logit_scale: float = 16.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise InvalidArgumentError("num_classes must be at least 2")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    weight_decay: float = 4e-5
    momentum: float = 0.9
    nesterov: bool = True
    schedule: str = "cosine"
    batch_size: int = 256
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if self.batch_size < 1:
            raise InvalidArgumentError("batch_size must be at least 1")

    def effective_batch_size(self, n: int) -> int:
        """Configured batch size, reduced so a small dataset still gives >= 10 steps per epoch."""
        return max(1, min(self.batch_size, n // 10 or 1))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


def _heads(dim, heads):
    while dim % heads:
        heads -= 1
    return heads


class ExtNet(nn.Module):
    """Images ``(B, H, W, C)`` in [0, 1] -> feature maps ``(B, P, D)``."""

    kind = "extnet"

    def __init__(self, cfg: ExtNetConfig):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(p * p * cfg.channels, cfg.embed_dim)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.num_patches, cfg.embed_dim) * 0.02)
        heads = _heads(cfg.embed_dim, cfg.num_heads)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.tail = nn.LayerNorm(cfg.embed_dim, elementwise_affine=False) if cfg.use_layer_norm_tail else None

    def patchify(self, images):
        b, h, w, c = images.shape
        p = self.cfg.patch_size
        x = images.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, (h // p) * (w // p), p * p * c)

    def forward(self, images):
        x = self.patch_embed(self.patchify((images - 0.5) * 2.0)) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.tail(x) if self.tail is not None else x


class RecNet(nn.Module):
    """Feature maps ``(B, P, D)`` -> (L2-normalized embedding ``(B, E)``, logits ``(B, C)``).

    Without position embedding the network is invariant to the order of the P rows.
    """

    kind = "recnet"

    def __init__(self, cfg: RecNetConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.input_proj = nn.Linear(d, d)
        self.pos_embed = (nn.Parameter(torch.randn(1, cfg.num_patches, d) * 0.02)
                          if cfg.position_embedding else None)
        heads = _heads(d, cfg.num_heads)
        self.blocks = nn.ModuleList(Block(d, heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, cfg.embedding_dim)
        self.classifier = nn.Parameter(torch.randn(cfg.num_classes, cfg.embedding_dim) * 0.1)

    def forward(self, fm):
        if fm.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"feature dim {fm.shape[-1]} != RecNet embed_dim {self.cfg.embed_dim}")
        x = self.input_proj(fm)
        if self.pos_embed is not None:
            x = x + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        emb = F.normalize(self.head(self.norm(x).mean(dim=1)), dim=-1)
        logits = self.cfg.logit_scale * emb @ F.normalize(self.classifier, dim=-1).T
        return emb, logits


def build(cls, cfg, seed: int = 0):
    """Construct ``cls(cfg)`` with initialization drawn from ``seed``."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = cls(cfg)
    model.init_seed = seed
    return model


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def _as_tensor(x, dtype=torch.float32):
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


@torch.no_grad()
def ext_forward(images, ext: ExtNet, batch_size: int = 256) -> np.ndarray:
    """Feature maps for one image ``(H, W, C)`` or a batch ``(B, H, W, C)``."""
    images = np.asarray(images, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    cfg = ext.cfg
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ShapeError(f"image shape {images.shape[1:]} does not match ExtNet config")
    if not np.all(np.isfinite(images)):
        raise NumericError("image contains non-finite values")
    ext.eval()
    out = np.concatenate([ext(_as_tensor(images[i:i + batch_size])).numpy()
                          for i in range(0, len(images), batch_size)])
    return out[0] if single else out


@torch.no_grad()
def rec_forward(fm, rec: RecNet, batch_size: int = 512):
    """(embeddings, logits) for one feature map ``(P, D)`` or a batch ``(B, P, D)``."""
    fm = np.asarray(fm)
    single = fm.ndim == 2
    if single:
        fm = fm[None]
    if fm.shape[-1] != rec.cfg.embed_dim:
        raise ShapeError(f"feature dim {fm.shape[-1]} != RecNet embed_dim {rec.cfg.embed_dim}")
    rec.eval()
    dtype = next(rec.parameters()).dtype
    embs, logits = [], []
    for i in range(0, len(fm), batch_size):
        e, l = rec(_as_tensor(fm[i:i + batch_size], dtype))
        embs.append(e.numpy())
        logits.append(l.numpy())
    embs, logits = np.concatenate(embs), np.concatenate(logits)
    return (embs[0], logits[0]) if single else (embs, logits)


# ---------------------------------------------------------------- persistence

_REGISTRY = {}


def register_model(kind: str, cls, cfg_cls) -> None:
    _REGISTRY[kind] = (cls, cfg_cls)


def save_params(model: nn.Module, path, provenance: dict | None = None) -> None:
    """Checkpoint as ``.npz``: tensors plus a JSON header (kind, config, init seed,
    and optional provenance such as config hash and seeds)."""
    meta = {"kind": model.kind, "config": asdict(model.cfg), "seed": getattr(model, "init_seed", None),
            "provenance": provenance or getattr(model, "provenance", {})}
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    tmp.replace(path)


def load_params(path) -> nn.Module:
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__meta__"}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("kind") not in _REGISTRY:
        raise CheckpointError(f"{path}: unknown model kind {meta.get('kind')!r}")
    cls, cfg_cls = _REGISTRY[meta["kind"]]
    model = cls(cfg_cls(**meta["config"]))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the stored config") from exc
    model.init_seed = meta["seed"]
    model.provenance = meta.get("provenance", {})
    return model


register_model("extnet", ExtNet, ExtNetConfig)
register_model("recnet", RecNet, RecNetConfig)


def params_equal(a: nn.Module, b: nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)


def params_snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# ---------------------------------------------------------------- training

@dataclass
class TrainRun:
    losses: list = field(default_factory=list)  # mean loss per epoch
    accuracies: list = field(default_factory=list)  # train accuracy per epoch
    lrs: list = field(default_factory=list)  # lr at the start of each epoch
    config: dict = field(default_factory=dict)
    seed: int = 0
    batch_size: int = 0
    steps: int = 0
    partial: bool = False
    model: nn.Module | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"losses": self.losses, "accuracies": self.accuracies, "lrs": self.lrs,
                "config": self.config, "seed": self.seed, "batch_size": self.batch_size,
                "steps": self.steps, "partial": self.partial,
                **{k: v for k, v in self.extra.items() if _jsonable(v)}}


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def make_optimizer(params, tcfg: TrainConfig, total_steps: int):
    opt = torch.optim.SGD(params, lr=tcfg.lr, momentum=tcfg.momentum, nesterov=tcfg.nesterov,
                          weight_decay=tcfg.weight_decay)
    if tcfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(1, total_steps))
    elif tcfg.schedule == "constant":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)
    else:
        raise InvalidArgumentError(f"unknown schedule {tcfg.schedule!r}")
    return opt, sched


def fit(model: nn.Module, inputs, targets, tcfg: TrainConfig, *,
        loss_fn: Callable | None = None,
        forward: Callable | None = None,
        batch_transform: Callable | None = None,
        acc_labels=None) -> TrainRun:
    """Minibatch SGD over ``(inputs, targets)``.

    ``forward(model, xb) -> logits`` defaults to ``model(xb)[1]``. ``targets`` may be
    integer labels or soft label rows. ``batch_transform(xb, yb, step) -> (xb, yb)``
    rewrites every minibatch (numpy arrays) before the forward pass; it may turn hard
    labels into soft ones. With a custom ``loss_fn`` the targets are passed through
    untouched and train accuracy is measured against ``acc_labels`` if given.
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets)
    n = len(inputs)
    if n == 0:
        raise InvalidArgumentError("cannot train on an empty dataset")
    if loss_fn is None and targets.ndim == 1 and targets.dtype.kind in "iu":
        c = getattr(model, "cfg", None)
        n_cls = getattr(c, "num_classes", None)
        if targets.min() < 0 or (n_cls is not None and targets.max() >= n_cls):
            raise InvalidArgumentError("labels must lie in [0, num_classes)")
    forward = forward or (lambda m, xb: m(xb)[1])
    custom_loss = loss_fn is not None
    loss_fn = loss_fn or _default_loss
    bs = tcfg.effective_batch_size(n)
    steps_per_epoch = math.ceil(n / bs)
    params = [p for p in model.parameters() if p.requires_grad]
    opt, sched = make_optimizer(params, tcfg, steps_per_epoch * tcfg.epochs)
    rng = np.random.default_rng([tcfg.seed, 65537])
    run = TrainRun(config=asdict(tcfg), seed=tcfg.seed, batch_size=bs, model=model)
    dtype = next(model.parameters()).dtype
    step = 0
    model.train()
    for epoch in range(tcfg.epochs):
        run.lrs.append(opt.param_groups[0]["lr"])
        order = rng.permutation(n)
        tot_loss, tot_correct = 0.0, 0
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            xb, yb = inputs[idx], targets[idx]
            if batch_transform is not None:
                xb, yb = batch_transform(xb, yb, step)
            soft = np.ndim(yb) == 2
            xb = _as_tensor(xb, dtype)
            yb = torch.from_numpy(np.asarray(yb))
            yb = yb.to(dtype) if soft else yb.long()
            logits = forward(model, xb)
            loss = loss_fn(logits, yb)
            if not torch.isfinite(loss):
                run.partial = True
                run.steps = step
                model.eval()
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", run)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            tot_loss += loss.item() * len(idx)
            if acc_labels is not None:
                hard = torch.from_numpy(np.asarray(acc_labels)[idx])
            elif custom_loss:
                hard = None
            else:
                hard = yb.argmax(-1) if soft else yb
            if hard is not None:
                tot_correct += int((logits.argmax(-1) == hard).sum())
        run.losses.append(tot_loss / n)
        run.accuracies.append(tot_correct / n)
    run.steps = step
    model.eval()
    return run


def _default_loss(logits, yb):
    if yb.ndim == 2:
        return -(yb * F.log_softmax(logits, -1)).sum(-1).mean()
    return F.cross_entropy(logits, yb)


def train_classifier(features, labels, rec_cfg: RecNetConfig, tcfg: TrainConfig,
                     init: RecNet | None = None, **kw) -> TrainRun:
    """Train a RecNet on ``(features, labels)``; the trained model is ``run.model``."""
    model = init if init is not None else build(RecNet, rec_cfg, tcfg.seed)
    return fit(model, features, labels, tcfg, **kw)


class _ProbeHead(nn.Module):
    def __init__(self, ext: ExtNet, num_classes: int):
        super().__init__()
        self.ext = ext
        self.fc = nn.Linear(ext.cfg.embed_dim, num_classes)

    def forward(self, images):
        return None, self.fc(self.ext(images).mean(dim=1))


def pretrain_ext(public, ext_cfg: ExtNetConfig, tcfg: TrainConfig) -> ExtNet:
    """Supervised pretraining on a public identity set; the classification head is
    discarded and the returned ExtNet is frozen. The run is kept on ``ext.pretrain_run``."""
    if len(public) == 0:
        raise InvalidArgumentError("public dataset is empty")
    ext = build(ExtNet, ext_cfg, tcfg.seed)
    with torch.random.fork_rng():
        torch.manual_seed(tcfg.seed + 1)
        wrapper = _ProbeHead(ext, public.num_ids)
    run = fit(wrapper, public.images, public.labels, tcfg)
    run.model = None
    freeze(ext)
    ext.pretrain_run = run
    return ext


def random_ext(ext_cfg: ExtNetConfig, seed: int = 0) -> ExtNet:
    """Randomly initialized, frozen ExtNet (ablation control)."""
    return freeze(build(ExtNet, ext_cfg, seed))


def linear_probe_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Accuracy of a ridge-regularized least-squares linear probe (one-vs-all)."""
    train_x = train_x.reshape(len(train_x), -1).astype(np.float64)
    test_x = test_x.reshape(len(test_x), -1).astype(np.float64)
    mu, sd = train_x.mean(0), train_x.std(0) + 1e-6
    a, b = (train_x - mu) / sd, (test_x - mu) / sd
    y = np.eye(int(train_y.max()) + 1)[train_y]
    w = np.linalg.solve(a.T @ a + 1.0 * len(a) * np.eye(a.shape[1]), a.T @ y)
    return float(np.mean((b @ w).argmax(1) == test_y))
