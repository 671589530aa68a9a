"""Checkpoint directory: ``manifest.json`` plus a raw ``tensors.bin`` payload.

The payload is the concatenation of every tensor in little-endian byte order,
in manifest order.  The manifest records the config hash, step, RNG state,
the trainer's scalar state, and a directory of ``name, shape, dtype, offset,
nbytes`` entries, so the payload can be read back without this package.
"""
from __future__ import annotations

import hashlib
import json
import os
import shutil
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractError

FORMAT = "aslora-checkpoint/1"
MANIFEST = "manifest.json"
PAYLOAD = "tensors.bin"


def _le(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def save(path: str | Path, arrays: dict[str, np.ndarray], meta: dict, config_hash: str) -> Path:
    """Write a checkpoint directory atomically (temp dir, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    directory = []
    digest = hashlib.sha256()
    offset = 0
    with open(tmp / PAYLOAD, "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            if arr.dtype.kind != "f":
                raise ContractError(f"checkpoint tensor {name} has non-float dtype {arr.dtype}")
            buf = np.ascontiguousarray(arr, dtype=_le(arr.dtype)).tobytes()
            fh.write(buf)
            digest.update(buf)
            directory.append({
                "name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                "offset": offset, "nbytes": len(buf),
            })
            offset += len(buf)
    manifest = {
        "format": FORMAT,
        "config_hash": config_hash,
        "step": meta["step"],
        "rng": meta["rng"],
        "byte_order": "little",
        "payload_bytes": offset,
        "payload_sha256": digest.hexdigest(),
        "tensors": directory,
        "state": {k: v for k, v in meta.items() if k not in ("step", "rng")},
    }
    (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1) + "\n")
    if path.exists():
        old = path.with_name(path.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no {MANIFEST}; not a checkpoint directory") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}/{MANIFEST}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unrecognised checkpoint format {manifest.get('format')!r}")
    return manifest


def load(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Return ``(arrays, meta, manifest)``; ``meta`` is what :func:`save` was given."""
    path = Path(path)
    manifest = read_manifest(path)
    payload = (path / PAYLOAD).read_bytes()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in manifest["tensors"]:
        dt = _le(entry["dtype"])
        raw = np.frombuffer(payload, dtype=dt, count=entry["nbytes"] // dt.itemsize, offset=entry["offset"])
        arrays[entry["name"]] = raw.astype(dt.newbyteorder("="), copy=True).reshape(entry["shape"])
    meta = {"step": manifest["step"], "rng": manifest["rng"], **manifest["state"]}
    return arrays, meta, manifest
