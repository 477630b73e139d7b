"""On-disk checkpoints: one SPKT file per tensor plus a JSON manifest.

Every tensor, dense or not, is stored in the bitmask container so a sparse
layer costs only its nonzeros. 1-D tensors are stored as a single row. The
manifest is written with sorted keys and carries no timestamps, so the same
model always serializes to the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .codec import Layout, StorageDtype, decode_matrix, encode_matrix, footprint, from_bytes, to_bytes
from .compression.quant import QuantizedMatrix
from .errors import CheckpointError, CorruptionError
from .masks import SparsityMask
from .model import ModelConfig, check_params, linear_names
from .tensors import FLOAT

MANIFEST = "manifest.json"
FORMAT = "sparsellm-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    cfg: ModelConfig
    params: Mapping
    mask: SparsityMask | None = None
    quantized: Mapping = field(default_factory=dict)  # layer name -> QuantizedMatrix
    metadata: Mapping = field(default_factory=dict)
    recipe: Mapping | None = None
    seed: int | None = None

    def __post_init__(self):
        check_params(self.cfg, self.params)
        unknown = sorted(set(self.quantized) - set(linear_names(self.cfg)))
        if unknown:
            raise CheckpointError(f"quantized entries for unknown layers: {', '.join(unknown)}")

    def layer_sparsity(self) -> dict:
        return {n: float(1.0 - np.count_nonzero(self.params[n]) / np.size(self.params[n]))
                for n in linear_names(self.cfg)}


def _file_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _write_tensor(root: Path, fname: str, a: np.ndarray, dtype: StorageDtype) -> dict:
    m = a.reshape(1, -1) if a.ndim == 1 else a
    sm = encode_matrix(m, Layout.ROWPAIR16, dtype)
    data = to_bytes(sm)
    (root / fname).write_bytes(data)
    fp = footprint(sm)
    return {"file": fname, "shape": list(a.shape), "sha256": _file_digest(data),
            "nnz": sm.nnz, "footprint_ratio": fp.ratio}


def _read_tensor(root: Path, entry: Mapping) -> np.ndarray:
    path = root / entry["file"]
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"missing tensor file {entry['file']}") from None
    if _file_digest(data) != entry["sha256"]:
        raise CheckpointError(f"{entry['file']}: content hash does not match the manifest")
    try:
        a = decode_matrix(from_bytes(data))
    except CorruptionError as exc:
        raise CheckpointError(f"{entry['file']}: {exc}") from None
    return a.reshape(entry["shape"])


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name in sorted(ckpt.params):
        a = np.asarray(ckpt.params[name], dtype=FLOAT)
        tensors[name] = _write_tensor(root, f"{name}.spkt", a, StorageDtype.REAL32)
    masks = {}
    if ckpt.mask is not None:
        for name in ckpt.mask:
            keep = ckpt.mask[name]
            if np.any(np.asarray(ckpt.params[name])[~keep] != 0):
                raise CheckpointError(f"layer {name}: weights are nonzero outside the mask")
            entry = _write_tensor(root, f"{name}.mask.spkt", keep.astype(np.int8), StorageDtype.INT8)
            entry["sparsity"] = ckpt.mask.layer_sparsity(name)
            entry["mask_sha256"] = SparsityMask({name: keep}).digest()
            masks[name] = entry
    quant = {}
    for name in sorted(ckpt.quantized):
        qm = ckpt.quantized[name]
        entry = {
            "q": _write_tensor(root, f"{name}.q.spkt", qm.q, StorageDtype.INT8),
            "scales": _write_tensor(root, f"{name}.scales.spkt", qm.scales, StorageDtype.REAL32),
            "act_scale": qm.act_scale,
        }
        if qm.smoothing is not None:
            entry["smoothing"] = _write_tensor(root, f"{name}.smoothing.spkt", qm.smoothing, StorageDtype.REAL32)
        quant[name] = entry
    manifest = {
        "format": FORMAT,
        "format_version": FORMAT_VERSION,
        "toolkit_version": __version__,
        "config": ckpt.cfg.to_dict(),
        "tensors": tensors,
        "masks": masks if ckpt.mask is not None else None,
        "mask_digest": ckpt.mask.digest() if ckpt.mask is not None else None,
        "quantized": quant,
        "layer_sparsity": ckpt.layer_sparsity(),
        "metadata": dict(ckpt.metadata),
        "recipe": ckpt.recipe,
        "seed": ckpt.seed,
    }
    (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return root


def read_manifest(path) -> dict:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        manifest = json.loads(p.read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {p}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p}: invalid manifest ({exc.msg})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{p}: not a {FORMAT} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{p}: unsupported format version {manifest.get('format_version')}")
    return manifest


def load_checkpoint(path) -> Checkpoint:
    root = Path(path)
    manifest = read_manifest(root)
    cfg = ModelConfig.from_dict(manifest["config"])
    params = {name: _read_tensor(root, e).astype(FLOAT) for name, e in manifest["tensors"].items()}
    mask = None
    if manifest["masks"] is not None:
        mask = SparsityMask({name: _read_tensor(root, e) != 0 for name, e in manifest["masks"].items()})
        if mask.digest() != manifest["mask_digest"]:
            raise CheckpointError("mask digest does not match the manifest")
    quantized = {}
    for name, e in manifest["quantized"].items():
        smoothing = _read_tensor(root, e["smoothing"]) if "smoothing" in e else None
        quantized[name] = QuantizedMatrix(_read_tensor(root, e["q"]).astype(np.int8),
                                          _read_tensor(root, e["scales"]), smoothing, e["act_scale"])
    return Checkpoint(cfg, params, mask, quantized, manifest["metadata"], manifest["recipe"], manifest["seed"])
