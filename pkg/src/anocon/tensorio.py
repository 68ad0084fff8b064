"""On-disk formats: raw tensors with a JSON header line, and dataset manifests.

Tensor file layout::

    {"dtype": "f32", "shape": [H, W], "byte_order": "little"}\\n
    <row-major little-endian payload>

``f32`` holds images, saliency maps and model parameters; ``u8`` holds
binary masks and may only contain 0 or 1.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, StorageError

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_tensor(path, grid) -> None:
    """Write a float grid (as f32) or boolean mask (as u8) to ``path``."""
    arr = np.asarray(grid)
    if arr.ndim == 0 or any(s < 1 for s in arr.shape):
        raise ValueError(f"shape components must be >= 1, got {arr.shape}")
    if arr.dtype == np.bool_:
        tag = "u8"
        payload = arr.astype(np.uint8)
    elif np.issubdtype(arr.dtype, np.number):
        tag = "f32"
        payload = arr.astype("<f4")
    else:
        raise TypeError(f"unsupported array dtype {arr.dtype}")
    header = json.dumps({"dtype": tag, "shape": list(arr.shape), "byte_order": "little"})
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii") + b"\n")
            fh.write(np.ascontiguousarray(payload).tobytes(order="C"))
    except OSError as exc:
        raise StorageError(path, exc.strerror or str(exc)) from exc


def read_tensor(path) -> np.ndarray:
    """Inverse of :func:`write_tensor`; masks come back as ``bool`` arrays."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise StorageError(path, exc.strerror or str(exc)) from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise ParseError("header", "missing newline terminator")
    try:
        header = json.loads(raw[:nl].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError("header", f"not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise ParseError("header", "expected a JSON object")

    tag = header.get("dtype")
    if tag not in _DTYPES:
        raise ParseError("dtype", f"unsupported dtype {tag!r}")
    if header.get("byte_order", "little") != "little":
        raise ParseError("byte_order", f"unsupported byte order {header['byte_order']!r}")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or not shape
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape)
    ):
        raise ParseError("shape", f"invalid shape {shape!r}")

    dt = _DTYPES[tag]
    expected = int(np.prod(shape)) * dt.itemsize
    payload = raw[nl + 1:]
    if len(payload) < expected:
        raise ParseError("payload", f"truncated: expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise ParseError("payload", f"trailing data: expected {expected} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    if tag == "u8":
        if np.any(arr > 1):
            raise ParseError("payload", "mask values must be 0 or 1")
        return arr.astype(bool)
    return arr.astype(np.float32)


@dataclass
class PseudoVolume:
    patient_id: str
    slices: list
    masks: Optional[list] = None

    def __post_init__(self):
        shapes = {np.shape(s) for s in self.slices}
        if len(shapes) > 1:
            raise ValueError(f"slices of {self.patient_id} have mixed shapes {sorted(shapes)}")
        if self.masks is not None:
            if len(self.masks) != len(self.slices):
                raise ValueError(f"{self.patient_id}: {len(self.masks)} masks for {len(self.slices)} slices")
            for m in self.masks:
                if np.shape(m) not in shapes:
                    raise ValueError(f"{self.patient_id}: mask shape {np.shape(m)} differs from slices")


@dataclass
class ManifestEntry:
    patient_id: str
    slices: list
    masks: Optional[list] = None


@dataclass
class DatasetManifest:
    split: str
    entries: list = field(default_factory=list)
    n_slices: int = 10
    root: Path = field(default_factory=Path)

    def resolve(self, rel) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "split": self.split,
            "n_slices": self.n_slices,
            "entries": [
                {"patient_id": e.patient_id, "slices": list(e.slices), "masks": None if e.masks is None else list(e.masks)}
                for e in self.entries
            ],
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    try:
        path.write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    except OSError as exc:
        raise StorageError(path, exc.strerror or str(exc)) from exc


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise StorageError(path, exc.strerror or str(exc)) from exc
    except json.JSONDecodeError as exc:
        raise ParseError("manifest", f"unreadable JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ParseError("manifest", "expected a JSON object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError("format_version", f"expected {FORMAT_VERSION}, got {doc.get('format_version')!r}")
    for key in ("split", "entries", "n_slices"):
        if key not in doc:
            raise ParseError(key, "missing field")
    if not isinstance(doc["entries"], list):
        raise ParseError("entries", "expected a list")
    entries = []
    for i, e in enumerate(doc["entries"]):
        if not isinstance(e, dict) or "patient_id" not in e or "slices" not in e:
            raise ParseError(f"entries[{i}]", "needs patient_id and slices")
        entries.append(ManifestEntry(str(e["patient_id"]), list(e["slices"]), e.get("masks")))
    return DatasetManifest(doc["split"], entries, doc["n_slices"], path.parent)


def validate(manifest: DatasetManifest, check_files: bool = True) -> list:
    """Return the sorted list of invariant violations (empty if valid)."""
    problems = set()
    if manifest.split not in SPLITS:
        problems.add(f"unknown split {manifest.split!r}")
    n = manifest.n_slices
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        problems.add(f"invalid n_slices {n!r}")
    seen = set()
    for e in manifest.entries:
        if e.patient_id in seen:
            problems.add(f"duplicate patient {e.patient_id}")
        seen.add(e.patient_id)
        if isinstance(n, int) and len(e.slices) != n:
            problems.add(f"entry {e.patient_id} has {len(e.slices)} slices, expected {n}")
        if e.masks is not None:
            if manifest.split == "train":
                problems.add("train entry has mask")
            if len(e.masks) != len(e.slices):
                problems.add(f"entry {e.patient_id} has {len(e.masks)} masks for {len(e.slices)} slices")
        if not check_files:
            continue
        for rel in list(e.slices) + list(e.masks or []):
            p = manifest.resolve(rel)
            if not p.is_file():
                problems.add(f"missing file {rel}")
                continue
            try:
                read_tensor(p)
            except (ParseError, StorageError) as exc:
                problems.add(f"unparseable file {rel}: {exc}")
    return sorted(problems)


def load_volumes(manifest: DatasetManifest) -> list:
    vols = []
    for e in manifest.entries:
        slices = [read_tensor(manifest.resolve(p)) for p in e.slices]
        masks = None if e.masks is None else [read_tensor(manifest.resolve(p)) for p in e.masks]
        vols.append(PseudoVolume(e.patient_id, slices, masks))
    return vols


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise StorageError(path, exc.strerror or str(exc)) from exc
    return path
