"""Checkpoint persistence: JSON header block + little-endian float64 arrays.

Layout: magic, format version, header length, header JSON, then every
parameter array concatenated in header order.  Headers carry the full
architecture metadata, curriculum stage, config snapshot, and rng seed
info, so a checkpoint alone rebuilds a forward-bit-exact model.  Writes
go through a temp file and rename for crash safety, and contain nothing
nondeterministic, so identical runs produce identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Optional, Tuple

import numpy as np

from .errors import CheckpointError
from .model import AnclafModel, ArchConfig, build_model, widen_sequence_to_attention

MAGIC = b"ANCLAFCK"
FORMAT_VERSION = 1
_FIXED = struct.Struct("<8sII")  # magic, version, header length


def _header_for(model: AnclafModel, stage: str, train_config: Optional[dict],
                rng_info: Optional[dict]) -> Tuple[dict, list]:
    params = model.parameters()
    entries = []
    offset = 0
    for name, p in params:
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        offset += p.size
    header = {
        "format_version": FORMAT_VERSION,
        "arch": model.arch.to_dict(),
        "variant": model.combiner.variant,
        "n": model.combiner.n,
        "fold": model.fold,
        "model_name": model.name,
        "dataset_tag": model.dataset_tag,
        "stage": stage,
        "train_config": train_config,
        "rng": rng_info or {},
        "params": entries,
        "total_floats": offset,
    }
    return header, params


def save_checkpoint(model: AnclafModel, path: str, stage: str = "",
                    train_config: Optional[dict] = None,
                    rng_info: Optional[dict] = None) -> None:
    header, params = _header_for(model, stage, train_config, rng_info)
    for name, p in params:
        if not np.all(np.isfinite(p.array)):
            raise CheckpointError(f"refusing to save non-finite parameter '{name}'")
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [_FIXED.pack(MAGIC, FORMAT_VERSION, len(blob)), blob]
    for _, p in params:
        chunks.append(p.array.astype("<f8").tobytes())
    tmp = path + ".tmp"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def _read_raw(path: str) -> Tuple[dict, bytes]:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < _FIXED.size:
        raise CheckpointError(f"truncated checkpoint {path}")
    magic, version, hlen = _FIXED.unpack_from(raw, 0)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version}")
    if len(raw) < _FIXED.size + hlen:
        raise CheckpointError(f"truncated checkpoint header in {path}")
    blob = raw[_FIXED.size:_FIXED.size + hlen]
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupted checkpoint header in {path}: {e}") from e
    return header, raw[_FIXED.size + hlen:]


def read_header(path: str) -> dict:
    return _read_raw(path)[0]


def load_checkpoint(path: str, n: Optional[int] = None) -> Tuple[AnclafModel, dict]:
    """Rebuild the model from a checkpoint; ``n`` overrides the stored
    sequence length (parameters are length-independent by design)."""
    header, payload = _read_raw(path)
    total = header["total_floats"]
    flat = np.frombuffer(payload, dtype="<f8")
    if flat.size != total:
        raise CheckpointError(f"checkpoint payload has {flat.size} floats, "
                              f"expected {total}")
    arch = ArchConfig.from_dict(header["arch"])
    model = build_model(arch, header["variant"], n if n is not None else header["n"],
                        seed=0, fold=header["fold"],
                        dataset_tag=header.get("dataset_tag", ""))
    named = dict(model.parameters())
    seen = set()
    for entry in header["params"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in named:
            raise CheckpointError(f"checkpoint parameter '{name}' not in model")
        p = named[name]
        if p.shape != shape:
            raise CheckpointError(f"parameter '{name}' shape {shape} != model {p.shape}")
        p.array[...] = flat[offset:offset + p.size].reshape(shape)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)}")
    return model, header


def load_sequence_as_attention(path: str, seed: int,
                               n: Optional[int] = None) -> Tuple[AnclafModel, dict]:
    """Load an ANCLaF-S checkpoint and widen it into an ANCLaF-SA model
    with zero-filled context columns and fresh attention weights."""
    model, header = load_checkpoint(path, n=n)
    return widen_sequence_to_attention(model, seed), header
