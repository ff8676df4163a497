"""Inference-phase defense: an adversarially trained noise encoder whose norm-capped
output is added to the clean features, and a server-side student RecNet distilled from
a clean-feature teacher."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import IdentityDataset
from .errors import InvalidArgumentError, ShapeError, TrainingDiverged
from .models import (Block, ExtNet, ExtNetConfig, RecNet, RecNetConfig, TrainConfig, TrainRun, _as_tensor,
                     _heads, build, ext_forward, fit, freeze, make_optimizer, rec_forward,
                     register_model)
from .pipeline import identification_accuracy


@dataclass(frozen=True)
class NoiseGenConfig:
    """Noise encoder; same block structure as ExtNet but reads the clean feature map."""

    embed_dim: int = 64
    num_patches: int = 16
    num_blocks: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    mix_alpha: float = 1.0
    beta: float = 1.0
    adv_steps_per_rec_step: int = 1
    objective: str = "minimax"  # or "nonsaturating"

    def __post_init__(self):
        if self.mix_alpha < 0:
            raise InvalidArgumentError("mix_alpha must be >= 0")
        if not self.beta > 0:
            raise InvalidArgumentError("beta must be positive")
        if self.objective not in ("minimax", "nonsaturating"):
            raise InvalidArgumentError(f"unknown generator objective {self.objective!r}")

    @classmethod
    def like(cls, ext_cfg: ExtNetConfig, **kw) -> "NoiseGenConfig":
        return cls(embed_dim=ext_cfg.embed_dim, num_patches=ext_cfg.num_patches,
                   num_blocks=ext_cfg.num_blocks, num_heads=ext_cfg.num_heads,
                   mlp_ratio=ext_cfg.mlp_ratio, **kw)


@dataclass(frozen=True)
class DistillConfig:
    temperature: float = 4.0
    ce_weight: float = 0.5
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise InvalidArgumentError("temperature must be positive")
        if not 0.0 <= self.ce_weight <= 1.0:
            raise InvalidArgumentError("ce_weight must lie in [0, 1]")


class NoiseGenerator(nn.Module):
    kind = "noisegen"

    def __init__(self, cfg: NoiseGenConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.input_proj = nn.Linear(d, d)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.num_patches, d) * 0.02)
        heads = _heads(d, cfg.num_heads)
        self.blocks = nn.ModuleList(Block(d, heads, cfg.mlp_ratio) for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, d)
        # start from zero noise: the game begins at the clean features
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, fm):
        x = self.input_proj(fm) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.out(self.norm(x))


register_model("noisegen", NoiseGenerator, NoiseGenConfig)


def mix_features(clean, noise, cfg: NoiseGenConfig):
    """``clean + alpha * noise``, with the noise rescaled per sample so that
    ``||noise||_F <= beta * ||clean||_F``. Accepts torch tensors or numpy arrays,
    single ``(P, D)`` maps or batches."""
    if tuple(clean.shape) != tuple(noise.shape):
        raise ShapeError(f"clean {tuple(clean.shape)} and noise {tuple(noise.shape)} differ in shape")
    if isinstance(clean, torch.Tensor):
        cn = torch.linalg.vector_norm(clean, dim=(-2, -1), keepdim=True)
        nn_ = torch.linalg.vector_norm(noise, dim=(-2, -1), keepdim=True)
        scale = torch.clamp(cfg.beta * cn / nn_.clamp_min(1e-12), max=1.0)
        return clean + cfg.mix_alpha * noise * scale
    clean, noise = np.asarray(clean), np.asarray(noise)
    cn = np.linalg.norm(clean.reshape(*clean.shape[:-2], -1), axis=-1)[..., None, None]
    nn_ = np.linalg.norm(noise.reshape(*noise.shape[:-2], -1), axis=-1)[..., None, None]
    scale = np.minimum(cfg.beta * cn / np.maximum(nn_, 1e-12), 1.0)
    return clean + cfg.mix_alpha * noise * scale


@torch.no_grad()
def noised_features(clean, gen: NoiseGenerator, batch_size: int = 512) -> np.ndarray:
    """Transmitted features ``mix(clean, gen(clean))`` (numpy, float32)."""
    clean = np.asarray(clean, dtype=np.float32)
    gen.eval()
    out = []
    for i in range(0, len(clean), batch_size):
        c = _as_tensor(clean[i:i + batch_size])
        out.append(mix_features(c, gen(c), gen.cfg).numpy())
    return np.concatenate(out)


def feature_generator(ext: ExtNet, gen: NoiseGenerator | None):
    """FG = ExtNet followed by the noise encoder, as a query-only oracle images -> features."""
    def oracle(images):
        clean = ext_forward(images, ext)
        return clean if gen is None else noised_features(clean, gen)
    return oracle


def with_layer_norm_tail(ext: ExtNet) -> ExtNet:
    """Copy of a (pretrained) ExtNet with a parameter-free LayerNorm appended."""
    cfg = replace(ext.cfg, use_layer_norm_tail=True)
    out = ExtNet(cfg)
    out.load_state_dict(ext.state_dict())
    out.init_seed = getattr(ext, "init_seed", None)
    return freeze(out)


def _accuracy(rec, feats, labels) -> float:
    return float(np.mean(rec_forward(feats, rec)[1].argmax(1) == labels))


def train_noise_generator(ds: IdentityDataset, ext: ExtNet, gen_cfg: NoiseGenConfig,
                          adv_init: RecNet, tcfg: TrainConfig, gen_lr: float | None = None,
                          features=None, freeze_generator: bool = False, adv_reset_every: int = 0):
    """Alternating min-max game on ``ds`` (ExtNet frozen throughout).

    Per minibatch: ``adv_steps_per_rec_step`` adversary steps minimizing
    CE(adv(mix(f, g(f))), y), then one generator step maximizing the same CE
    (``minimax``) or minimizing -log(1 - p_y) (``nonsaturating``). The adversary starts
    from a copy of ``adv_init`` (normally the clean-feature teacher); the generator
    starts at zero output. With ``adv_reset_every = k > 0`` the adversary is replaced by
    a freshly initialized RecNet every k epochs, so the generator must defeat learners
    starting from scratch, as a black-box attacker's surrogate does.
    Returns ``(gen, adv_rec, history)``.
    """
    if features is None:
        features = ext_forward(ds.images, ext)
    feats = torch.from_numpy(np.asarray(features, dtype=np.float32))
    labels = torch.from_numpy(ds.labels).long()
    n = len(feats)
    gen = build(NoiseGenerator, gen_cfg, tcfg.seed + 2)
    adv = copy.deepcopy(adv_init)
    for p in adv.parameters():
        p.requires_grad_(True)
    bs = tcfg.effective_batch_size(n)
    steps = math.ceil(n / bs) * tcfg.epochs
    adv_opt, adv_sched = make_optimizer(adv.parameters(), tcfg, steps * gen_cfg.adv_steps_per_rec_step)
    gen_opt, gen_sched = make_optimizer(gen.parameters(), replace(tcfg, lr=gen_lr or tcfg.lr), steps)
    rng = np.random.default_rng([tcfg.seed, 65537])
    hist = {"adv_ce": [], "adv_acc": [], "gen_objective": [], "noise_ratio": []}
    for epoch in range(tcfg.epochs):
        if adv_reset_every and epoch and epoch % adv_reset_every == 0:
            adv = build(RecNet, adv_init.cfg, tcfg.seed + 1000 + epoch)
            adv_opt, adv_sched = make_optimizer(adv.parameters(), replace(tcfg, schedule="constant"), 1)
        order = rng.permutation(n)
        sums = dict.fromkeys(hist, 0.0)
        for i in range(0, n, bs):
            idx = torch.from_numpy(order[i:i + bs])
            fb, yb = feats[idx], labels[idx]
            adv.train()
            for _ in range(gen_cfg.adv_steps_per_rec_step):
                with torch.no_grad():
                    mixed = mix_features(fb, gen(fb), gen_cfg)
                logits = adv(mixed)[1]
                loss = F.cross_entropy(logits, yb)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"adversary loss non-finite at epoch {epoch}",
                                           TrainRun(partial=True, extra=hist))
                adv_opt.zero_grad(set_to_none=True)
                loss.backward()
                adv_opt.step()
                adv_sched.step()
            noise = gen(fb)
            mixed = mix_features(fb, noise, gen_cfg)
            logits = adv(mixed)[1]
            ce = F.cross_entropy(logits, yb)
            if gen_cfg.objective == "minimax":
                g_loss = -ce
            else:
                p_true = F.softmax(logits, -1).gather(1, yb[:, None]).squeeze(1)
                g_loss = -torch.log1p(-p_true.clamp(max=1 - 1e-6)).mean()
            if not torch.isfinite(g_loss):
                raise TrainingDiverged(f"generator loss non-finite at epoch {epoch}",
                                       TrainRun(partial=True, extra=hist))
            if not freeze_generator:
                gen_opt.zero_grad(set_to_none=True)
                g_loss.backward()
                gen_opt.step()
                gen_sched.step()
            with torch.no_grad():
                ratio = (torch.linalg.vector_norm(mixed - fb, dim=(-2, -1))
                         / torch.linalg.vector_norm(fb, dim=(-2, -1))).max().item()
            k = len(idx)
            sums["adv_ce"] += ce.item() * k
            sums["adv_acc"] += float((logits.argmax(-1) == yb).sum())
            sums["gen_objective"] += -g_loss.item() * k
            sums["noise_ratio"] = max(sums["noise_ratio"], ratio)
        for key in ("adv_ce", "adv_acc", "gen_objective"):
            hist[key].append(sums[key] / n)
        hist["noise_ratio"].append(sums["noise_ratio"])
    freeze(gen)
    freeze(adv)
    return gen, adv, hist


def distill_loss(student_logits, teacher_logits, labels, dcfg: DistillConfig):
    """(1 - lam) * T^2 * KL(softmax(t/T) || softmax(s/T)) + lam * CE(s, y)."""
    t = dcfg.temperature
    kl = F.kl_div(F.log_softmax(student_logits / t, -1), F.log_softmax(teacher_logits / t, -1),
                  reduction="batchmean", log_target=True)
    ce = F.cross_entropy(student_logits, labels)
    lam = dcfg.ce_weight
    if lam == 1.0:
        return ce
    return (1 - lam) * t * t * kl + lam * ce


def distill_recnet(ds: IdentityDataset, ext: ExtNet, gen: NoiseGenerator, teacher: RecNet,
                   student_cfg: RecNetConfig, dcfg: DistillConfig, tcfg: TrainConfig,
                   features=None, init: RecNet | None = None) -> TrainRun:
    """Server-side student on noised features, guided by the frozen teacher's logits on
    the clean features."""
    if features is None:
        features = ext_forward(ds.images, ext)
    clean = np.asarray(features, dtype=np.float32)
    mixed = noised_features(clean, gen)
    teacher_logits = rec_forward(clean, teacher)[1].astype(np.float32)
    pairs = np.arange(len(clean))
    student_cfg = replace(student_cfg, num_classes=ds.num_ids)
    if init is not None:
        student = copy.deepcopy(init)
        for p in student.parameters():
            p.requires_grad_(True)
    else:
        student = build(RecNet, student_cfg, dcfg.seed)
    tcfg = replace(tcfg, epochs=dcfg.epochs, seed=dcfg.seed)
    t_logits = torch.from_numpy(teacher_logits)
    labels = torch.from_numpy(ds.labels).long()

    # targets carry sample indices so the loss can look up teacher logits
    def loss_fn(logits, idx):
        return distill_loss(logits, t_logits[idx], labels[idx], dcfg)

    run = fit(student, mixed, pairs, tcfg, loss_fn=loss_fn, acc_labels=ds.labels)
    run.extra["distill"] = asdict(dcfg)
    return run


def eval_xnnd(testset: IdentityDataset, ext: ExtNet, gen: NoiseGenerator | None, student: RecNet,
              attack_reports=(), seed: int = 0, features=None) -> dict:
    """Utility of the server-side model on transmitted test features, plus attack ASRs."""
    if features is None:
        features = ext_forward(testset.images, ext)
    sent = features if gen is None else noised_features(features, gen)
    emb = rec_forward(sent, student)[0]
    return {"utility": identification_accuracy(emb, testset.labels, seed),
            "asr": {r.attack_name: r.leak for r in attack_reports},
            "reports": [r.to_json() for r in attack_reports]}
