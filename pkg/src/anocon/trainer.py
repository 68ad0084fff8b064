"""Training loops for the AE/VAE baselines, GradCAMCons and AMCons."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import maskops
from .attention import channel_mean, weighted_activations
from .constraints import SIZE_KINDS, ConstraintSpec, entropy_from_logits, entropy_term, size_term
from .errors import ConfigError, UsageError
from .tensorio import DatasetManifest, ensure_dir, load_volumes, validate
from .vae import VAE, ModelConfig, VaeLossSpec, save_checkpoint, vae_loss

log = logging.getLogger(__name__)

METHODS = ("ae", "vae", "gradcamcons", "amcons")
PROFILES = ("paper", "desk")
HISTORY_COLUMNS = ("epoch", "recon", "kl", "constraint", "total", "t_eff", "entropy")


@dataclass
class TrainConfig:
    method: str = "vae"
    epochs: int = 30
    warmup_epochs: int = 0
    batch_size: int = 16
    lr: float = 1e-3
    beta: float = 1.0
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)
    seed: int = 0
    repetitions: int = 3
    block_s: int = 1
    recon: str = "bce"
    recon_reduction: str = "mean"
    model: ModelConfig = field(default_factory=ModelConfig)
    profile: str = "desk"

    def __post_init__(self):
        if isinstance(self.constraint, dict):
            self.constraint = ConstraintSpec(**self.constraint)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.check()

    def check(self):
        c = self.constraint
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.epochs < 1 or self.batch_size < 1 or self.repetitions < 1:
            raise ConfigError("epochs, batch_size and repetitions must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if not 1 <= self.block_s <= self.model.n_blocks:
            raise ConfigError(f"block_s must be in 1..{self.model.n_blocks}")
        if self.method == "gradcamcons":
            if self.warmup_epochs >= self.epochs:
                raise ConfigError("gradcamcons needs warmup_epochs < epochs")
            if c.kind not in SIZE_KINDS:
                raise ConfigError(f"gradcamcons needs a size constraint {SIZE_KINDS}, got {c.kind!r}")
        elif self.method == "amcons":
            if c.kind != "entropy":
                raise ConfigError(f"amcons needs the entropy constraint, got {c.kind!r}")
        elif c.kind != "none":
            raise ConfigError(f"method {self.method} takes no attention constraint, got {c.kind!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d) -> "TrainConfig":
        return cls(**d)


def defaults_for(method: str, profile: str = "paper") -> TrainConfig:
    """Published hyperparameters (``paper``) or the CPU-sized ``desk`` profile."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    if method == "gradcamcons":
        cfg = TrainConfig(method, epochs=300, warmup_epochs=50, batch_size=8, lr=1e-5, beta=1.0,
                          constraint=ConstraintSpec("logbarrier", lambda_s=1e3, t=10.0), block_s=1,
                          model=ModelConfig.paper(), profile=profile)
    elif method == "amcons":
        cfg = TrainConfig(method, epochs=250, batch_size=8, lr=1e-4, beta=10.0,
                          constraint=ConstraintSpec("entropy", lambda_h=0.1), block_s=1,
                          model=ModelConfig.paper(), profile=profile)
    else:
        cfg = TrainConfig(method, epochs=250, batch_size=8, lr=1e-4, beta=1.0 if method == "vae" else 0.0,
                          model=ModelConfig.paper(), profile=profile)
    if profile == "desk":
        cfg = replace(cfg, **DESK_OVERRIDES[method], model=ModelConfig(), profile="desk")
    return cfg


DESK_OVERRIDES = {
    "ae": dict(epochs=30, batch_size=16, lr=1e-3),
    "vae": dict(epochs=30, batch_size=16, lr=1e-3),
    "gradcamcons": dict(epochs=30, warmup_epochs=10, batch_size=16, lr=1e-3),
    "amcons": dict(epochs=30, batch_size=16, lr=1e-3),
}


@dataclass
class TrainedModel:
    model: VAE
    history: list
    config: TrainConfig
    seed: int

    def save(self, directory) -> Path:
        directory = ensure_dir(directory)
        save_checkpoint(self.model, directory, {
            "method": self.config.method, "epoch": self.config.epochs, "seed": self.seed,
            "block_s": self.config.block_s,
        })
        (directory / "config.json").write_text(json.dumps(self.config.to_json(), indent=2, sort_keys=True) + "\n")
        (directory / "history.csv").write_text(history_csv(self.history))
        return directory


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow(["" if row[k] is None else repr(row[k]) for k in HISTORY_COLUMNS])
    return buf.getvalue()


def load_images(manifest: DatasetManifest) -> torch.Tensor:
    vols = load_volumes(manifest)
    arrs = [s for v in vols for s in v.slices]
    return torch.from_numpy(np.stack(arrs)[:, None].astype(np.float32))


def brain_masks(images) -> torch.Tensor:
    """Otsu + closing tissue masks, one per image, as a (N, H, W) bool tensor."""
    arr = images.numpy()[:, 0] if isinstance(images, torch.Tensor) else np.asarray(images)
    return torch.from_numpy(np.stack([maskops.brain_mask(a) for a in arr]))


def downsample_mask(mask, size):
    """Nearest-neighbour resize of (N, H, W) masks; empty results fall back to any-pooling."""
    m = mask[:, None].float()
    out = F.interpolate(m, size=size, mode="nearest")[:, 0] > 0.5
    empty = out.flatten(1).sum(1) == 0
    if torch.any(empty):
        f = mask.shape[-1] // size[-1]
        pooled = F.max_pool2d(m, f)[:, 0] > 0.5
        out[empty] = pooled[empty]
    return out


def _block_size(cfg: TrainConfig):
    h, w = cfg.model.input_size
    f = 2 ** cfg.block_s
    return h // f, w // f


def train(config: TrainConfig, train_manifest=None, val_manifest=None, images=None, brains=None,
          seed: Optional[int] = None) -> TrainedModel:
    """Train one model; deterministic given (config, data, seed)."""
    config.check()
    seed = config.seed if seed is None else seed
    if images is None:
        if train_manifest is None:
            raise UsageError("need a training manifest or an image tensor")
        problems = validate(train_manifest)
        if problems:
            raise ConfigError("invalid training manifest: " + "; ".join(problems))
        if val_manifest is not None:
            problems = validate(val_manifest)
            if problems:
                raise ConfigError("invalid validation manifest: " + "; ".join(problems))
        images = load_images(train_manifest)
    images = images.float()
    if tuple(images.shape[-2:]) != config.model.input_size:
        raise ConfigError(f"images are {tuple(images.shape[-2:])}, model expects {config.model.input_size}")

    method = config.method
    spec = config.constraint
    s = config.block_s
    if method == "amcons":
        if brains is None:
            brains = brain_masks(images)
        small_brains = downsample_mask(brains, _block_size(config))

    torch.manual_seed(seed)
    model = VAE(config.model)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(seed)
    n = images.shape[0]
    history = []

    for epoch in range(config.epochs):
        warm = method == "gradcamcons" and epoch < config.warmup_epochs
        beta = 1.0 if warm else (0.0 if method == "ae" else config.beta)
        loss_spec = VaeLossSpec(beta, config.recon, config.recon_reduction)
        t_eff = spec.t_eff(epoch) if spec.kind == "logbarrier" else None
        sums = dict(recon=0.0, kl=0.0, constraint=0.0, total=0.0, entropy=0.0)
        n_batches = 0
        for idx in torch.randperm(n, generator=gen).split(config.batch_size):
            x = images[idx]
            xhat, mu, logvar, acts = model(x, sample=method != "ae", generator=gen)
            total, recon, kl = vae_loss(x, xhat, mu, logvar, loss_spec)
            cons = torch.zeros((), dtype=total.dtype)
            ent = None
            if method == "gradcamcons" and not warm:
                cam = torch.sigmoid(weighted_activations(acts[s - 1], mu, create_graph=True))
                cons = size_term(cam, spec, epoch)
            elif method == "amcons":
                am = channel_mean(acts[s - 1])
                b = small_brains[idx]
                if spec.lambda_h > 0:
                    cons = entropy_term(am, b, spec)
                    ent = -cons.item() / spec.lambda_h
                else:
                    with torch.no_grad():
                        ent = entropy_from_logits(am, b).mean().item()
            loss = total + cons
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sums["recon"] += recon.item()
            sums["kl"] += kl.item()
            sums["constraint"] += cons.item()
            sums["total"] += loss.item()
            if ent is not None:
                sums["entropy"] += ent
            n_batches += 1
        row = {k: v / n_batches for k, v in sums.items()}
        row["epoch"] = epoch
        row["t_eff"] = t_eff
        if method != "amcons":
            row["entropy"] = None
        history.append(row)
        log.info("%s seed=%d epoch %d: %s", method, seed, epoch,
                 " ".join(f"{k}={row[k]:.5g}" for k in ("recon", "kl", "constraint", "total")))
        if not math.isfinite(row["total"]):
            raise FloatingPointError(f"loss diverged at epoch {epoch}")
    model.eval()
    return TrainedModel(model, history, config, seed)


def run_repetitions(config: TrainConfig, train_manifest=None, val_manifest=None, images=None, brains=None,
                    out=None) -> list:
    """Train ``config.repetitions`` models with seeds ``seed + r``; save under ``out/rep<r>``."""
    runs = []
    for r in range(config.repetitions):
        tm = train(config, train_manifest, val_manifest, images=images, brains=brains, seed=config.seed + r)
        if out is not None:
            tm.save(Path(out) / f"rep{r}")
        runs.append(tm)
    return runs


def mean_attention_entropy(model: VAE, images, brains, s: int) -> float:
    """Mean scaled entropy of pixel-softmaxed activation maps over ``brains``."""
    h, w = images.shape[-2] // 2 ** s, images.shape[-1] // 2 ** s
    with torch.no_grad():
        _, _, acts = model.encode(images.float())
        am = channel_mean(acts[s - 1])
        return float(entropy_from_logits(am, downsample_mask(brains, (h, w))).mean())
