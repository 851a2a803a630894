"""Checkpoint files: a JSON manifest plus a little-endian float64 payload.

The manifest lists every array as (name, shape, byte offset) into the
sibling ``.bin`` payload and carries a free-form ``meta`` dict (model
hyperparameters, RNG state, iteration counters). Serialization is
canonical (sorted keys, fixed separators) so identical state produces
identical bytes.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write `path` (manifest JSON) and the payload next to it."""
    if not path.endswith(".json"):
        raise ValueError("checkpoint path must end in .json")
    payload_name = os.path.basename(path)[: -len(".json")] + ".bin"
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())  # C-order bytes regardless of layout
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f8",
        "payload": payload_name,
        "payload_bytes": offset,
        "arrays": entries,
        "meta": meta or {},
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    with open(os.path.join(os.path.dirname(path) or ".", payload_name), "wb") as fh:
        fh.write(b"".join(blobs))
    os.replace(tmp, path)


def load(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        manifest = json.load(fh)
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} is not supported "
            f"(this build reads version {FORMAT_VERSION})"
        )
    payload_path = os.path.join(os.path.dirname(path) or ".", manifest["payload"])
    with open(payload_path, "rb") as fh:
        payload = fh.read()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload size {len(payload)} does not match manifest "
            f"{manifest['payload_bytes']}"
        )
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest["meta"]
