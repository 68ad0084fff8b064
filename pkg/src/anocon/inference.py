"""Saliency maps, threshold selection and segmentation for trained models and baselines."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import maskops, metrics
from .attention import activation_map_raw, gradcam_raw, minmax, save_saliency, upsample
from .errors import UsageError
from .tensorio import ensure_dir, load_manifest, read_tensor, write_tensor

SALIENCY_METHODS = ("ae", "vae", "gradcamcons", "amcons", "histeq")
N_BINS = 256


@dataclass
class ThresholdRule:
    kind: str = "op"
    percentile: Optional[float] = None
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("op", "percentile", "fixed"):
            raise UsageError(f"unknown threshold rule {self.kind!r}")
        if self.kind == "percentile" and (self.percentile is None or not 0 < self.percentile <= 100):
            raise UsageError("percentile rule needs a percentile in (0, 100]")
        if self.kind == "fixed" and self.value is None:
            raise UsageError("fixed rule needs a value")

    @classmethod
    def parse(cls, text: str) -> "ThresholdRule":
        """``op``, ``p<N>`` (e.g. ``p98``) or ``fixed:<v>``."""
        text = text.strip()
        if text == "op":
            return cls("op")
        if text.startswith("fixed:"):
            try:
                return cls("fixed", value=float(text[6:]))
            except ValueError:
                raise UsageError(f"bad fixed threshold {text!r}") from None
        if text.startswith("p"):
            try:
                return cls("percentile", percentile=float(text[1:]))
            except ValueError:
                raise UsageError(f"bad percentile rule {text!r}") from None
        raise UsageError(f"unknown threshold rule {text!r}")

    def __str__(self):
        if self.kind == "percentile":
            return f"p{self.percentile:g}"
        if self.kind == "fixed":
            return f"fixed:{self.value:g}"
        return "op"


def histogram_equalize(x, brain) -> np.ndarray:
    """Map brain pixels through the empirical CDF of brain intensities; zero elsewhere."""
    x = np.asarray(x, np.float64)
    brain = np.asarray(brain, bool)
    if not brain.any():
        raise UsageError("histogram equalization needs a non-empty brain mask")
    bins = np.clip((x * N_BINS).astype(np.int64), 0, N_BINS - 1)
    counts = np.bincount(bins[brain], minlength=N_BINS)
    cdf = np.cumsum(counts) / counts.sum()
    return np.where(brain, cdf[bins], 0.0)


def _as_batch(images):
    t = torch.as_tensor(np.asarray(images, np.float32))
    if t.dim() == 2:
        t = t[None, None]
    elif t.dim() == 3:
        t = t[:, None]
    return t


def saliency(images, model=None, method: str = "amcons", brains=None, block_s: int = 1,
             raw: bool = False, erosion: Optional[int] = None) -> np.ndarray:
    """Anomaly saliency for a batch (N, H, W); higher means more anomalous.

    Attention methods are zeroed outside the brain mask; residual and
    HistEq maps are zeroed outside a slightly eroded brain mask. With
    ``raw=True`` AMCons returns the un-normalized upsampled activation map.
    """
    if method not in SALIENCY_METHODS:
        raise UsageError(f"unknown saliency method {method!r}")
    if method != "histeq" and model is None:
        raise UsageError(f"method {method} needs a trained model")
    x = _as_batch(images)
    arr = x[:, 0].numpy().astype(np.float64)
    if brains is None:
        brains = np.stack([maskops.brain_mask(a) for a in arr])
    brains = np.asarray(brains, bool).reshape(arr.shape)
    size = arr.shape[-2:]

    if method in ("ae", "vae", "histeq"):
        r = erosion if erosion is not None else maskops.erosion_radius(size[0])
        region = np.stack([maskops.erode(b, r) for b in brains])
        if method == "histeq":
            sal = np.stack([histogram_equalize(a, b) for a, b in zip(arr, brains)])
        else:
            with torch.no_grad():
                mu, _, _ = model.encode(x)
                xhat = model.decode(mu)[:, 0].double().numpy()
            sal = np.abs(arr - xhat)
        return np.where(region, sal, 0.0)

    if method == "gradcamcons":
        v = minmax(gradcam_raw(x, model, block_s).double()).numpy()
        sal = upsample(v, size)
        return np.where(brains, sal, 0.0)

    am = upsample(activation_map_raw(x, model, block_s).double().numpy(), size)
    if raw:
        return np.where(brains, am, 0.0)
    return minmax(torch.from_numpy(am), mask=torch.from_numpy(brains)).numpy()


def fit_threshold(rule: ThresholdRule, train_saliencies=None, train_brains=None,
                  val_saliencies=None, val_masks=None) -> float:
    """Threshold from a rule.

    ``op`` uses validation saliencies with ground truth; ``percentile`` uses
    normal training saliencies only (mean of per-image brain-pixel
    percentiles); ``fixed`` returns its value.
    """
    if rule.kind == "fixed":
        return float(rule.value)
    if rule.kind == "percentile":
        if train_saliencies is None:
            raise UsageError("percentile rule needs training saliencies")
        vals = []
        for i, sal in enumerate(train_saliencies):
            sal = np.asarray(sal, np.float64)
            b = np.ones(sal.shape, bool) if train_brains is None else np.asarray(train_brains[i], bool)
            if not b.any():
                continue
            vals.append(np.percentile(sal[b], rule.percentile))
        if not vals:
            raise UsageError("no brain pixels in the training saliencies")
        return float(np.mean(vals))
    if val_saliencies is None or val_masks is None:
        raise UsageError("operative point needs validation saliencies and ground-truth masks")
    s = np.concatenate([np.asarray(a, np.float64).ravel() for a in val_saliencies])
    y = np.concatenate([np.asarray(m, bool).ravel() for m in val_masks])
    _, tau = metrics.operative_point(metrics.pr_curve(s, y))
    return tau


def segment(sal, threshold: float, brain=None) -> np.ndarray:
    m = np.asarray(sal) > threshold
    if brain is not None:
        m &= np.asarray(brain, bool)
    return m


# dataset-level plumbing ---------------------------------------------------

def _load_model(model_ref):
    if str(model_ref) == "histeq":
        return None, "histeq", 1
    from .vae import load_checkpoint

    model, doc = load_checkpoint(model_ref)
    return model, doc["method"], int(doc.get("block_s", 1))


def predict_dataset(model_ref, data_dir, out_dir, splits=("train", "val", "test"), batch: int = 64) -> dict:
    """Write per-slice saliency and brain-mask tensors for every split present."""
    model, method, s = _load_model(model_ref)
    data_dir = Path(data_dir)
    out_dir = ensure_dir(out_dir)
    index = {"method": method, "block_s": s, "model": str(model_ref), "splits": {}}
    for split in splits:
        mpath = data_dir / split / "manifest.json"
        if not mpath.is_file():
            continue
        man = load_manifest(mpath)
        items = []
        for e in man.entries:
            imgs = np.stack([read_tensor(man.resolve(p)) for p in e.slices])
            brains = np.stack([maskops.brain_mask(a) for a in imgs])
            sal = np.concatenate([
                saliency(imgs[i:i + batch], model, method, brains[i:i + batch], s)
                for i in range(0, len(imgs), batch)
            ])
            ensure_dir(out_dir / split / e.patient_id)
            for k, rel in enumerate(e.slices):
                stem = Path(rel).stem
                sp = f"{split}/{e.patient_id}/{stem}.sal.t"
                bp = f"{split}/{e.patient_id}/{stem}.brain.t"
                save_saliency(out_dir / sp, sal[k], method, s, None)
                write_tensor(out_dir / bp, brains[k])
                items.append({
                    "patient_id": e.patient_id, "slice": k, "saliency": sp, "brain": bp,
                    "image": str(Path(split) / rel),
                    "mask": None if e.masks is None else str(Path(split) / e.masks[k]),
                })
        index["splits"][split] = items
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")
    return index


def load_predictions(pred_dir, data_dir, split):
    """Saliencies, brains, ground-truth masks (or None) and scan ids of one split."""
    pred_dir, data_dir = Path(pred_dir), Path(data_dir)
    index = json.loads((pred_dir / "index.json").read_text())
    items = index["splits"].get(split, [])
    sal = [read_tensor(pred_dir / it["saliency"]) for it in items]
    brains = [read_tensor(pred_dir / it["brain"]) for it in items]
    gts = None
    if items and all(it["mask"] is not None for it in items):
        present = [(data_dir / it["mask"]).is_file() for it in items]
        if all(present):
            gts = [read_tensor(data_dir / it["mask"]) for it in items]
    return sal, brains, gts, [it["patient_id"] for it in items]


def threshold_from_predictions(rule: ThresholdRule, pred_dir, data_dir) -> float:
    if rule.kind == "percentile":
        sal, brains, _, _ = load_predictions(pred_dir, data_dir, "train")
        if not sal:
            raise UsageError("percentile rule needs training-split predictions")
        return fit_threshold(rule, train_saliencies=sal, train_brains=brains)
    if rule.kind == "op":
        sal, _, gts, _ = load_predictions(pred_dir, data_dir, "val")
        if not sal or gts is None:
            raise UsageError("operative point needs validation predictions with ground-truth masks")
        return fit_threshold(rule, val_saliencies=sal, val_masks=gts)
    return fit_threshold(rule)


def evaluate_predictions(pred_dir, data_dir, rule: ThresholdRule, split: str = "test"):
    """EvalReport on ``split`` with the threshold fitted per ``rule``; also returns the pooled data."""
    tau = threshold_from_predictions(rule, pred_dir, data_dir)
    sal, brains, gts, scans = load_predictions(pred_dir, data_dir, split)
    if not sal or gts is None:
        raise UsageError(f"split {split!r} has no predictions with ground truth")
    report = metrics.evaluate(sal, gts, scans, threshold=tau, rule=str(rule), brains=brains)
    return report, (sal, brains, gts, scans)
