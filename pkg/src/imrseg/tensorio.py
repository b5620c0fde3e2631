"""Portable tensor files and checkpoint containers.

A tensor file is a single ASCII header line ``IMRSEG-TENSOR v1 <dims>``
followed by the raw little-endian float32 payload in C order.  ``<dims>``
is a space separated list of sizes (empty for a scalar).
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = "IMRSEG-TENSOR"
VERSION = "v1"
TENSOR_SUFFIX = ".imrt"


def write_tensor(path, array):
    arr = np.asarray(array, dtype="<f4")
    dims = " ".join(str(d) for d in arr.shape)
    header = f"{MAGIC} {VERSION} {dims}".rstrip() + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        parts = header.decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise TensorFormatError(f"{path}: header is not ASCII") from exc
    if len(parts) < 2 or parts[0] != MAGIC or parts[1] != VERSION:
        raise TensorFormatError(f"{path}: bad header {header[:40]!r}")
    try:
        shape = tuple(int(p) for p in parts[2:])
    except ValueError as exc:
        raise TensorFormatError(f"{path}: bad dims {parts[2:]}") from exc
    count = int(np.prod(shape)) if shape else 1
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: expected {4 * count} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def config_hash(config_dict):
    blob = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(directory, state_dict, config_dict, extra=None):
    """Write named tensors plus an ``index.json`` describing them."""
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, value in state_dict.items():
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        rel = f"tensors/{name}{TENSOR_SUFFIX}"
        write_tensor(directory / rel, arr)
        entries[name] = {"file": rel, "shape": list(arr.shape)}
    index = {
        "format": f"{MAGIC} {VERSION}",
        "config": config_dict,
        "config_hash": config_hash(config_dict),
        "tensors": entries,
    }
    if extra:
        index.update(extra)
    with open(directory / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory):
    """Return ``(index, {name: np.ndarray})``."""
    directory = Path(directory)
    index_path = directory / "index.json"
    if not index_path.is_file():
        raise FileNotFoundError(f"no checkpoint index at {index_path}")
    with open(index_path) as fh:
        index = json.load(fh)
    if index.get("config_hash") != config_hash(index.get("config", {})):
        raise TensorFormatError(f"{index_path}: config hash mismatch")
    tensors = {}
    for name, entry in index["tensors"].items():
        arr = read_tensor(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise TensorFormatError(f"{name}: shape {arr.shape} != index {entry['shape']}")
        tensors[name] = arr
    return index, tensors


def tree_digest(directory):
    """Stable sha256 over every file under ``directory`` (names and bytes)."""
    h = hashlib.sha256()
    root = Path(directory)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for fn in sorted(filenames):
            p = Path(dirpath) / fn
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
