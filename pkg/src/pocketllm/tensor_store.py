"""Weight storage: plain-text manifests, raw float32 tensors, subvector split/merge.

Manifest format, line by line:

    pocketllm-manifest v1
    name|role|block|d_in|d_out|dtype|relative_path

Tensor files are headerless little-endian IEEE-754 binary32, row-major,
exactly d_in*d_out values each.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import as_weight_matrix, check_divides, check_positive_int

MANIFEST_HEADER = "pocketllm-manifest v1"
ROLES = ("q", "k", "v", "o", "gate", "up", "down", "other")
LINEAR_ROLES = ("q", "k", "v", "o", "gate", "up", "down")


class ManifestError(ValueError):
    """Malformed manifest text or a tensor file inconsistent with its entry."""


@dataclass
class LayerEntry:
    name: str
    role: str
    block_index: int
    d_in: int
    d_out: int
    data_path: str
    dtype: str = "f32"


@dataclass
class ModelManifest:
    root: Path
    layers: list[LayerEntry] = field(default_factory=list)

    def names(self):
        return [e.name for e in self.layers]

    def layer(self, name):
        for e in self.layers:
            if e.name == name:
                return e
        raise KeyError(f"no layer named {name!r} in manifest")

    def load_weights(self, name):
        """Read one layer as a (d_in, d_out) float32 array."""
        e = self.layer(name)
        raw = np.fromfile(self.root / e.data_path, dtype="<f4")
        return raw.reshape(e.d_in, e.d_out)


def _parse_entry(line, lineno):
    parts = line.split("|")
    if len(parts) != 7:
        raise ManifestError(f"line {lineno}: expected 7 '|'-separated fields, got {len(parts)}")
    name, role, block, d_in, d_out, dtype, rel = (p.strip() for p in parts)
    if not name:
        raise ManifestError(f"line {lineno}: empty layer name")
    if role not in ROLES:
        raise ManifestError(f"line {lineno}: unknown role {role!r} (expected one of {ROLES})")
    if dtype != "f32":
        raise ManifestError(f"line {lineno}: unsupported dtype {dtype!r}; only f32 is accepted")
    try:
        block_i, din_i, dout_i = int(block), int(d_in), int(d_out)
    except ValueError as exc:
        raise ManifestError(f"line {lineno}: non-integer shape field: {exc}") from exc
    if din_i <= 0 or dout_i <= 0 or block_i < 0:
        raise ManifestError(f"line {lineno}: invalid shape ({din_i}, {dout_i}) or block {block_i}")
    return LayerEntry(name, role, block_i, din_i, dout_i, rel, dtype)


def load_manifest(path):
    """Parse a manifest file and validate every tensor file against its declared shape."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise ManifestError(f"missing header line {MANIFEST_HEADER!r}")
    root = path.parent
    entries = []
    seen = set()
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        entry = _parse_entry(line, i)
        if entry.name in seen:
            raise ManifestError(f"duplicate layer name {entry.name!r}")
        seen.add(entry.name)
        tensor_path = root / entry.data_path
        if not tensor_path.is_file():
            raise ManifestError(f"tensor file missing for layer {entry.name!r}: {tensor_path}")
        expected = entry.d_in * entry.d_out * 4
        actual = os.path.getsize(tensor_path)
        if actual != expected:
            raise ManifestError(
                f"layer {entry.name!r}: tensor file is {actual} bytes, "
                f"expected {expected} for shape ({entry.d_in}, {entry.d_out})"
            )
        entries.append(entry)
    return ModelManifest(root=root, layers=entries)


def save_manifest(root, named_weights, manifest_name="model.manifest"):
    """Write tensors plus a manifest describing them; returns the manifest path.

    named_weights: iterable of (name, role, block_index, array) tuples.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    seen = set()
    for name, role, block_index, w in named_weights:
        if name in seen:
            raise ManifestError(f"duplicate layer name {name!r}")
        seen.add(name)
        if role not in ROLES:
            raise ManifestError(f"unknown role {role!r}")
        arr = np.ascontiguousarray(np.asarray(w, dtype="<f4"))
        if arr.ndim != 2:
            raise ManifestError(f"layer {name!r}: expected a 2-D array, got shape {arr.shape}")
        rel = f"{name}.bin"
        arr.tofile(root / rel)
        lines.append(f"{name}|{role}|{block_index}|{arr.shape[0]}|{arr.shape[1]}|f32|{rel}")
    out = root / manifest_name
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


@dataclass
class SubvectorSet:
    """Rows of a weight matrix cut into length-d pieces, kept in row order.

    data has shape (N, d) with N = d_in * L; rows i*L .. i*L+L-1 are the
    left-to-right pieces of source row i.
    """

    data: np.ndarray
    d: int
    L: int
    d_in: int
    origin: str = ""

    @property
    def n(self):
        return self.data.shape[0]

    def validate(self):
        if self.data.ndim != 2 or self.data.shape[1] != self.d:
            raise ValueError(f"subvector data shape {self.data.shape} does not match d={self.d}")
        if self.data.shape[0] != self.d_in * self.L:
            raise ValueError(
                f"subvector count {self.data.shape[0]} != d_in*L = {self.d_in}*{self.L}"
            )
        return self


def split_rows(w, d, origin=""):
    """Cut each row of w into d-wide subvectors (a pure reshape)."""
    w = np.asarray(w)
    if w.ndim != 2:
        raise ValueError(f"expected a 2-D weight matrix, got shape {w.shape}")
    d_in, d_out = w.shape
    L = check_divides(d, d_out)
    data = np.ascontiguousarray(w).reshape(d_in * L, d)
    return SubvectorSet(data=data, d=d, L=L, d_in=d_in, origin=origin)


def merge(sset, d=None):
    """Exact inverse of split_rows; returns the (d_in, d_out) matrix."""
    if d is not None and d != sset.d:
        raise ValueError(f"merge width {d} does not match subvector width {sset.d}")
    sset.validate()
    return sset.data.reshape(sset.d_in, sset.L * sset.d)
