"""Checkpoint files: a JSON manifest followed by a float64 payload.

Layout::

    b"FEDSICK1"                 magic
    uint64 (little-endian)      manifest length in bytes
    manifest                    UTF-8 JSON: config_hash, round, meta,
                                tensors = [{name, shape, offset}, ...]
    payload                     contiguous little-endian float64 data;
                                ``offset`` is in bytes from payload start
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from fedsi.autodiff import ParamTree

MAGIC = b"FEDSICK1"
_LE_F64 = np.dtype("<f8")


class CheckpointError(OSError):
    pass


class CheckpointShapeError(ValueError):
    pass


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], config_hash: str = "",
                    round: int = 0, meta: Mapping[str, Any] | None = None) -> None:
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps(
        {"config_hash": config_hash, "round": int(round), "meta": dict(meta or {}), "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(manifest)))
            fh.write(manifest)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc.strerror or exc})") from exc


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Returns ``(tensors, manifest)``; tensors are native-endian float64."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc.strerror or exc})") from exc
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        (n,) = struct.unpack("<Q", blob[8:16])
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
        payload = memoryview(blob)[16 + n:]
        tensors = {}
        for e in manifest["tensors"]:
            count = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype=_LE_F64, count=count, offset=e["offset"])
            tensors[e["name"]] = arr.astype(np.float64).reshape(e["shape"])
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    return tensors, manifest


def checkpoint_io(params: ParamTree, path: str | Path, mode: str, **manifest_fields):
    """``save`` writes ``params``; ``load`` reads a checkpoint whose tensors
    must match the names and shapes of ``params`` (used as the template)."""
    if mode == "save":
        save_checkpoint(path, params, **manifest_fields)
        return None
    if mode != "load":
        raise ValueError(f"mode must be 'save' or 'load', got {mode!r}")
    tensors, _ = load_checkpoint(path)
    for name, expected in params.items():
        if name not in tensors:
            raise CheckpointShapeError(f"checkpoint has no tensor {name!r}")
        if tensors[name].shape != expected.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: checkpoint shape {tensors[name].shape}, expected {expected.shape}"
            )
    return ParamTree((name, tensors[name]) for name in params)
