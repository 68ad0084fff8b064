"""Deterministic brain-like phantoms: textured elliptical tissue on a black
background, optionally carrying bright (or dark) disk-shaped lesions.

Every slice is a pure function of ``(seed, cohort, patient, slice)``; the
lesions draw from their own stream so the lesion-free twin of an
anomalous slice is the same image with the blobs switched off.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .tensorio import DatasetManifest, ManifestEntry, ensure_dir, save_manifest, write_tensor

COHORTS = {"train": 0, "val": 1, "test": 2}
DEFAULT_SPLITS = {"train": 40, "val": 6, "test": 10}

TISSUE_RANGE = (0.15, 0.5)
MIN_FRACTION, MAX_FRACTION = 0.001, 0.10


@dataclass
class Ellipse:
    cy: float
    cx: float
    a: float
    b: float
    theta: float

    def inside(self, yy, xx):
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0


@dataclass
class SynthSlice:
    image: np.ndarray
    mask: Optional[np.ndarray]
    twin: np.ndarray
    ellipse: Ellipse

    @property
    def anomaly_fraction(self) -> float:
        return 0.0 if self.mask is None else float(self.mask.mean())


def _patient_ellipse(rng, size):
    return Ellipse(
        cy=size / 2 + rng.uniform(-0.05, 0.05) * size,
        cx=size / 2 + rng.uniform(-0.05, 0.05) * size,
        a=rng.uniform(0.32, 0.42) * size,
        b=rng.uniform(0.26, 0.36) * size,
        theta=rng.uniform(0, np.pi),
    )


def _tissue(rng, ell, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    inside = ell.inside(yy, xx)
    val = np.full((size, size), 0.32)
    for _ in range(rng.integers(3, 6)):
        # bump centers stay near the tissue
        r = rng.uniform(0, 0.8)
        phi = rng.uniform(0, 2 * np.pi)
        cy = ell.cy + r * ell.b * np.sin(phi)
        cx = ell.cx + r * ell.a * np.cos(phi)
        sig = rng.uniform(0.1, 0.25) * size
        amp = rng.uniform(-0.1, 0.12)
        val += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
    val = np.clip(val, *TISSUE_RANGE)
    return np.where(inside, val, 0.0), inside


def _blobs(rng, ell, size, tissue):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    for _ in range(100):
        offset = np.zeros((size, size))
        support = np.zeros((size, size), bool)
        for _ in range(rng.integers(1, 4)):
            rad = rng.uniform(0.03, 0.15) * size
            for _ in range(50):
                cy, cx = rng.uniform(0, size, 2)
                disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
                if disk.any() and np.all(tissue[disk]):
                    break
            else:
                continue
            offset = np.where(disk, np.maximum(offset, rng.uniform(0.3, 0.5)), offset)
            support |= disk
        frac = support.mean()
        if support.any() and MIN_FRACTION <= frac <= MAX_FRACTION:
            return support, offset
    raise RuntimeError("could not place lesions inside tissue")


def gen_slice(seed: int, patient: int, index: int, size: int = 64, anomalous: bool = False,
              cohort: int = 0, hypointense: bool = False) -> SynthSlice:
    if size < 32:
        raise ValueError("size must be >= 32")
    ell = _patient_ellipse(np.random.default_rng([seed, cohort, patient]), size)
    rng = np.random.default_rng([seed, cohort, patient, index])
    shrink = rng.uniform(0.93, 1.0)
    ell = Ellipse(ell.cy, ell.cx, ell.a * shrink, ell.b * shrink, ell.theta + rng.uniform(-0.05, 0.05))
    image, inside = _tissue(rng, ell, size)
    twin = image.astype(np.float32)
    if not anomalous:
        return SynthSlice(twin, None, twin, ell)
    support, offset = _blobs(np.random.default_rng([seed, cohort, patient, index, 1]), ell, size, inside)
    if hypointense:
        lesion = image * (1.0 - offset)
    else:
        lesion = image + offset
    out = np.where(support, lesion, image).astype(np.float32)
    return SynthSlice(out, support, twin, ell)


def _write_split(out, split, seed, n_patients, n_slices, size, anomalous, hypointense=False):
    out = ensure_dir(out)
    cohort = COHORTS.get(split, 0)
    entries = []
    stats = {}
    for p in range(n_patients):
        pid = f"{split}{p:03d}"
        pdir = ensure_dir(out / pid)
        slices, masks, fracs = [], [], []
        for i in range(n_slices):
            sl = gen_slice(seed, p, i, size, anomalous, cohort, hypointense)
            rel = f"{pid}/slice_{i:02d}.t"
            write_tensor(pdir / f"slice_{i:02d}.t", sl.image)
            slices.append(rel)
            if anomalous:
                mrel = f"{pid}/mask_{i:02d}.t"
                write_tensor(pdir / f"mask_{i:02d}.t", sl.mask)
                masks.append(mrel)
                fracs.append(round(sl.anomaly_fraction, 8))
        entries.append(ManifestEntry(pid, slices, masks if anomalous else None))
        if anomalous:
            stats[pid] = fracs
    manifest = DatasetManifest(split, entries, n_slices, Path(out))
    save_manifest(manifest, out / "manifest.json")
    if anomalous:
        (out / "anomaly_fraction.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return manifest


def gen_normal(seed, n_patients, slices_per_patient, size, out, split="train"):
    return _write_split(out, split, seed, n_patients, slices_per_patient, size, False)


def gen_anomalous(seed, n_patients, slices_per_patient, size, out, split="test", hypointense=False):
    return _write_split(out, split, seed, n_patients, slices_per_patient, size, True, hypointense)


def make_benchmark(root, seed=0, n_train=40, n_val=6, n_test=10, slices=10, size=64, hypointense=False):
    """Write train (normal) / val / test (anomalous) splits under ``root``."""
    root = ensure_dir(root)
    return {
        "train": gen_normal(seed, n_train, slices, size, root / "train"),
        "val": gen_anomalous(seed, n_val, slices, size, root / "val", "val", hypointense),
        "test": gen_anomalous(seed, n_test, slices, size, root / "test", "test", hypointense),
    }
