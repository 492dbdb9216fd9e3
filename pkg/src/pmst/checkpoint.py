"""Self-describing binary tensor container (``*.ckpt``).

Layout::

    b"PMST" | u32 version | u64 header length | UTF-8 JSON header | payload

The header holds free-form metadata plus a tensor directory of
``{name, dtype, shape, offset, nbytes}`` entries; offsets are relative to the
start of the payload, which stores little-endian float64 values row-major.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

MAGIC = b"PMST"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


class CheckpointError(ValueError):
    pass


def _as_array(value: Any) -> tuple[str, np.ndarray]:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    tag = "i64" if np.issubdtype(arr.dtype, np.integer) else "f64"
    return tag, np.asarray(arr, dtype=_DTYPES[tag], order="C")


def save_tensors(path: str | Path, tensors: Mapping[str, Any], meta: Mapping[str, Any] | None = None) -> None:
    directory = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        tag, arr = _as_array(value)
        raw = arr.tobytes()
        directory.append({"name": name, "dtype": tag, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": dict(meta or {}), "tensors": directory}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    prefix = fh.read(_PREFIX.size)
    if len(prefix) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    return json.loads(fh.read(hlen).decode("utf-8"))


def load_tensors(path: str | Path, as_torch: bool = True) -> tuple[dict[str, Any], dict]:
    """Return ``(tensors, meta)``; float tensors come back as float64."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    tensors: dict[str, Any] = {}
    end = 0
    for entry in sorted(header["tensors"], key=lambda e: e["offset"]):
        if entry["offset"] < end:
            raise CheckpointError(f"{path}: overlapping tensor {entry['name']}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} runs past end of file")
        dtype = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(payload, dtype=dtype, count=entry["nbytes"] // dtype.itemsize,
                            offset=entry["offset"]).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr) if as_torch else arr
    # keep the writer's ordering
    order = [e["name"] for e in header["tensors"]]
    return {k: tensors[k] for k in order}, header["meta"]


def digest(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode("utf-8")).hexdigest()[:16]


def save_model(path: str | Path, model, meta: Mapping[str, Any] | None = None) -> None:
    """Write a model's tensors plus the description needed to rebuild it."""
    header = {"model": model.describe(), **dict(meta or {})}
    if "metric_log" in header:
        header["metric_log_digest"] = digest(header.pop("metric_log"))
    save_tensors(path, model.state_dict(), header)


def load_model(path: str | Path):
    from .model import Model

    tensors, meta = load_tensors(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: not a model checkpoint")
    model = Model.from_description(meta["model"])
    model.load_state_dict(tensors)
    model.eval()
    return model, meta
