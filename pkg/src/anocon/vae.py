"""Residual convolutional VAE with a dense latent space, and its ELBO loss."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError, UsageError
from .tensorio import ensure_dir, read_tensor, write_tensor

RECON_KINDS = ("bce", "l2", "ssim")
BCE_EPS = 1e-7

BASE_WIDTHS = (64, 128, 256, 512, 512, 512)


@dataclass
class ModelConfig:
    latent_dim: int = 32
    width_scale: float = 0.125
    input_size: tuple = (64, 64)
    n_blocks: int = 4
    widths: Optional[tuple] = None
    blocks_per_stage: int = 1
    stem_kernel: int = 7
    norm: str = "none"

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.widths is not None:
            self.widths = tuple(int(w) for w in self.widths)
        if self.latent_dim < 1:
            raise UsageError("latent_dim must be positive")
        if self.n_blocks < 2:
            raise UsageError("n_blocks must be >= 2")
        if self.width_scale <= 0:
            raise UsageError("width_scale must be positive")
        div = 2 ** self.n_blocks
        if any(s % div for s in self.input_size):
            raise UsageError(f"input size {self.input_size} not divisible by 2**n_blocks = {div}")
        if self.widths is not None and len(self.widths) != self.n_blocks:
            raise UsageError("widths needs one entry per block")
        if self.norm not in ("none", "batch"):
            raise UsageError(f"unknown norm {self.norm!r}")

    @property
    def channels(self) -> tuple:
        if self.widths is not None:
            return self.widths
        return tuple(max(1, int(round(w * self.width_scale))) for w in BASE_WIDTHS[: self.n_blocks])

    @property
    def bottleneck(self) -> tuple:
        h, w = self.input_size
        f = 2 ** self.n_blocks
        return self.channels[-1], h // f, w // f

    def to_json(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["widths"] = None if self.widths is None else list(self.widths)
        return d

    @classmethod
    def paper(cls) -> "ModelConfig":
        """ResNet-18 widths at 224x224 with two residual blocks per stage."""
        return cls(latent_dim=32, input_size=(224, 224), n_blocks=5, widths=(64, 64, 128, 256, 512),
                   blocks_per_stage=2)


def _norm(kind, c):
    return nn.BatchNorm2d(c) if kind == "batch" else nn.Identity()


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, norm="none"):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.bn1 = _norm(norm, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.bn2 = _norm(norm, cout)
        self.skip = None
        if cin != cout or stride != 1:
            self.skip = nn.Sequential(nn.Conv2d(cin, cout, 1, stride), _norm(norm, cout))

    def forward(self, x):
        h = self.bn2(self.conv2(F.relu(self.bn1(self.conv1(x)))))
        s = x if self.skip is None else self.skip(x)
        return F.relu(h + s)


class UpBlock(nn.Module):
    def __init__(self, cin, cout, n=1, norm="none"):
        super().__init__()
        self.body = nn.Sequential(*[ResBlock(cin if i == 0 else cout, cout, norm=norm) for i in range(n)])

    def forward(self, x):
        return self.body(F.interpolate(x, scale_factor=2, mode="nearest"))


class VAE(nn.Module):
    """Encoder blocks 1..n each halve the resolution; block 1 is the stem conv."""

    def __init__(self, config: ModelConfig = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        ch = config.channels
        k = config.stem_kernel
        nm = config.norm
        self.stem = nn.Sequential(nn.Conv2d(1, ch[0], k, 2, k // 2), _norm(nm, ch[0]))
        self.stages = nn.ModuleList()
        for i in range(1, config.n_blocks):
            layers = [ResBlock(ch[i - 1], ch[i], 2, nm)]
            layers += [ResBlock(ch[i], ch[i], norm=nm) for _ in range(config.blocks_per_stage - 1)]
            self.stages.append(nn.Sequential(*layers))
        c, h, w = config.bottleneck
        self.to_latent = nn.Linear(c * h * w, 2 * config.latent_dim)
        self.from_latent = nn.Linear(config.latent_dim, c * h * w)
        self.up = nn.ModuleList(
            UpBlock(ch[i], ch[i - 1], config.blocks_per_stage, nm) for i in range(config.n_blocks - 1, 0, -1)
        )
        self.head = nn.Conv2d(ch[0], 1, 3, 1, 1)

    def _check_input(self, x):
        want = (1, *self.config.input_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(("B", *want), tuple(x.shape), "image batch")

    def encode(self, x):
        """Return ``(mu, logvar, activations)``; ``activations[k-1]`` is block k's output."""
        self._check_input(x)
        acts = [F.relu(self.stem(x))]
        for stage in self.stages:
            acts.append(stage(acts[-1]))
        out = self.to_latent(acts[-1].flatten(1))
        d = self.config.latent_dim
        return out[:, :d], out[:, d:], acts

    def encode_from(self, s: int, act):
        """Continue encoding from the output of block ``s``."""
        h = act
        for stage in self.stages[s - 1:]:
            h = stage(h)
        out = self.to_latent(h.flatten(1))
        d = self.config.latent_dim
        return out[:, :d], out[:, d:]

    def decode(self, z):
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(("B", self.config.latent_dim), tuple(z.shape), "latent")
        c, h, w = self.config.bottleneck
        y = F.relu(self.from_latent(z)).view(-1, c, h, w)
        for blk in self.up:
            y = blk(y)
        y = F.interpolate(y, scale_factor=2, mode="nearest")
        return torch.sigmoid(self.head(y))

    def forward(self, x, sample: bool = True, generator=None, noise=None):
        mu, logvar, acts = self.encode(x)
        if noise is not None:
            z = mu + torch.exp(0.5 * logvar) * noise
        elif sample:
            z = reparameterize(mu, logvar, generator)
        else:
            z = mu
        return self.decode(z), mu, logvar, acts


def reparameterize(mu, logvar, generator=None):
    eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_divergence(mu, logvar):
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    mu = torch.as_tensor(mu)
    logvar = torch.as_tensor(logvar)
    if mu.dim() == 1:
        mu, logvar = mu[None], logvar[None]
    return (-0.5 * (1 + logvar - mu ** 2 - torch.exp(logvar)).sum(dim=1)).mean()


def _gaussian_window(size=11, sigma=1.5, dtype=torch.float32):
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0):
    """Mean SSIM over valid (un-padded) Gaussian-weighted windows."""
    if x.dim() == 2:
        x, y = x[None, None], y[None, None]
    w = _gaussian_window(window, sigma, x.dtype).to(x.device)[None, None]
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    n, c = x.shape[:2]
    x = x.reshape(n * c, 1, *x.shape[2:])
    y = y.reshape(n * c, 1, *y.shape[2:])
    mx = F.conv2d(x, w)
    my = F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mx * mx
    syy = F.conv2d(y * y, w) - my * my
    sxy = F.conv2d(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return (num / den).mean()


def reconstruction_loss(x, xhat, kind: str = "bce", reduction: str = "mean"):
    """Pixel-mean loss; ``reduction="sum"`` scales it to a per-image pixel sum."""
    if x.shape != xhat.shape:
        raise ShapeError(tuple(x.shape), tuple(xhat.shape), "reconstruction")
    if kind == "bce":
        p = torch.clamp(xhat, BCE_EPS, 1 - BCE_EPS)
        loss = -(x * torch.log(p) + (1 - x) * torch.log(1 - p)).mean()
    elif kind == "l2":
        loss = ((x - xhat) ** 2).mean()
    elif kind == "ssim":
        loss = 1.0 - ssim(x, xhat)
    else:
        raise UsageError(f"unknown reconstruction loss {kind!r}; expected one of {RECON_KINDS}")
    if reduction == "sum":
        return loss * x[0].numel()
    if reduction != "mean":
        raise UsageError(f"unknown reduction {reduction!r}")
    return loss


@dataclass
class VaeLossSpec:
    beta: float = 1.0
    recon: str = "bce"
    reduction: str = "mean"

    def __post_init__(self):
        if self.beta < 0:
            raise UsageError("beta must be nonnegative")
        if self.recon not in RECON_KINDS:
            raise UsageError(f"unknown reconstruction loss {self.recon!r}")


def vae_loss(x, xhat, mu, logvar, spec: VaeLossSpec):
    recon = reconstruction_loss(x, xhat, spec.recon, spec.reduction)
    kl = kl_divergence(mu, logvar)
    return recon + spec.beta * kl, recon, kl


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: VAE, directory, meta: dict) -> Path:
    """Write ``checkpoint.json`` plus one tensor file per parameter."""
    directory = ensure_dir(directory)
    ensure_dir(directory / "params")
    files = {}
    for name, tensor in model.state_dict().items():
        rel = f"params/{name}.t"
        # the tensor format has no 0-d grids; scalars are stored as length-1
        write_tensor(directory / rel, tensor.detach().cpu().float().reshape(tensor.shape or (1,)).numpy())
        files[name] = rel
    doc = dict(meta)
    doc["model_config"] = model.config.to_json()
    doc["params"] = files
    (directory / "checkpoint.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    if directory.is_file():
        directory = directory.parent
    doc = json.loads((directory / "checkpoint.json").read_text())
    model = VAE(ModelConfig(**doc["model_config"]))
    ref = model.state_dict()
    state = {name: torch.from_numpy(read_tensor(directory / rel)).reshape(ref[name].shape)
             for name, rel in doc["params"].items()}
    model.load_state_dict(state)
    model.eval()
    return model, doc
