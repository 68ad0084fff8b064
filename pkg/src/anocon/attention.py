"""Encoder attention: Grad-CAM from the latent mean and plain activation maps."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import MetricUndefinedError, UsageError
from .tensorio import write_tensor

KINDS = ("gradcam_sigmoid", "gradcam_minmax", "am_raw", "am_softmax")
MINMAX_EPS = 1e-8


@dataclass
class AttentionMap:
    values: np.ndarray          # (B, h, w) at block resolution
    kind: str
    block_index: int
    full: Optional[np.ndarray] = None  # (B, H, W)


def _check_block(model, s):
    n = model.config.n_blocks
    if not 1 <= s <= n:
        raise UsageError(f"block index {s} out of range 1..{n}")


def weighted_activations(act, mu, create_graph: bool = False):
    """sum_k alpha_k * act_k with alpha_k the spatial mean of d(sum_j mu_j)/d act_k."""
    (g,) = torch.autograd.grad(mu.sum(), act, create_graph=create_graph, retain_graph=True)
    alpha = g.mean(dim=(2, 3), keepdim=True)
    return (alpha * act).sum(dim=1)


def channel_mean(act):
    return act.mean(dim=1)


def minmax(v, eps: float = MINMAX_EPS, mask=None):
    """Per-map (v - min) / (max - min + eps), optionally over ``mask`` pixels only."""
    if mask is None:
        lo = v.amin(dim=(-2, -1), keepdim=True)
        hi = v.amax(dim=(-2, -1), keepdim=True)
        return (v - lo) / (hi - lo + eps)
    mask = torch.as_tensor(mask, dtype=torch.bool).expand_as(v)
    big = torch.finfo(v.dtype).max
    lo = torch.where(mask, v, torch.full_like(v, big)).amin(dim=(-2, -1), keepdim=True)
    hi = torch.where(mask, v, torch.full_like(v, -big)).amax(dim=(-2, -1), keepdim=True)
    out = (v - lo) / (hi - lo + eps)
    return torch.where(mask, out, torch.zeros_like(out))


def squash(v, how: str):
    if how == "sigmoid":
        return torch.sigmoid(v)
    if how == "minmax":
        return minmax(v)
    raise UsageError(f"unknown squash {how!r}")


def gradcam_raw(x, model, s: int):
    """Pre-squash Grad-CAM at block ``s`` for a batch, with frozen parameters."""
    _check_block(model, s)
    with torch.no_grad():
        _, _, acts = model.encode(x)
    act = acts[s - 1].detach().requires_grad_(True)
    with torch.enable_grad():
        mu, _ = model.encode_from(s, act)
        return weighted_activations(act, mu).detach()


def gradcam(x, model, s: int = 1, squash_with: str = "minmax") -> AttentionMap:
    v = squash(gradcam_raw(x, model, s), squash_with)
    arr = v.cpu().numpy()
    return AttentionMap(arr, f"gradcam_{squash_with}", s, upsample(arr, tuple(x.shape[-2:])))


def activation_map_raw(x, model, s: int):
    _check_block(model, s)
    with torch.no_grad():
        _, _, acts = model.encode(x)
        return channel_mean(acts[s - 1])


def activation_map(x, model, s: int = 1) -> AttentionMap:
    arr = activation_map_raw(x, model, s).cpu().numpy()
    return AttentionMap(arr, "am_raw", s, upsample(arr, tuple(x.shape[-2:])))


def pearson(a, b) -> float:
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    if a.size < 2 or a.size != b.size:
        raise MetricUndefinedError("correlation needs two equal-length series of >= 2 values")
    a = a - a.mean()
    b = b - b.mean()
    da, db = np.sqrt(a @ a), np.sqrt(b @ b)
    if da == 0 or db == 0:
        raise MetricUndefinedError("zero variance series")
    return float((a @ b) / (da * db))


def gradcam_am_correlation(x_batch, model, s: int = 1) -> float:
    return pearson(gradcam_raw(x_batch, model, s).cpu().numpy(), activation_map_raw(x_batch, model, s).cpu().numpy())


def upsample(values, target):
    """Bilinear resize (half-pixel centers) of a (h, w) or (B, h, w) map."""
    arr = np.asarray(values)
    single = arr.ndim == 2
    t = torch.as_tensor(arr if not single else arr[None])
    if tuple(t.shape[-2:]) == tuple(target):
        out = t
    else:
        out = F.interpolate(t[:, None].double(), size=tuple(target), mode="bilinear", align_corners=False)[:, 0]
        out = out.to(t.dtype)
    out = out.numpy()
    return out[0] if single else out


def save_saliency(path, values, kind: str, block_index: Optional[int] = None, squash_with: Optional[str] = None):
    """Tensor file plus a ``<path>.json`` sidecar describing the map."""
    path = Path(path)
    write_tensor(path, np.asarray(values, np.float32))
    meta = {"kind": kind, "block_index": block_index, "squash": squash_with}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")
