"""Self-describing checkpoint container.

Layout::

    b"SSYNCKPT" | uint64 little-endian header length | UTF-8 JSON header | payload

The header lists every tensor with dtype, shape and byte offset into the
payload, so it can be read without touching the parameters. Output bytes are a
pure function of the header and tensor values.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from ..errors import ValidationError

MAGIC = b"SSYNCKPT"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, header: Mapping[str, Any], state: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    tensors = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy())
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    full = {"format_version": FORMAT_VERSION, **header, "tensors": tensors}
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for c in chunks:
            f.write(c)
    return path


def _read_header(f, path) -> dict:
    if f.read(len(MAGIC)) != MAGIC:
        raise ValidationError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", f.read(8))
    header = json.loads(f.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {header.get('format_version')}")
    return header


def read_header(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return _read_header(f, path)


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = _read_header(f, path)
        payload = f.read()
    state = {}
    for t in header["tensors"]:
        raw = payload[t["offset"] : t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(t["dtype"])).reshape(t["shape"]).copy()
        state[t["name"]] = torch.from_numpy(arr)
    return header, state


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_sha256(state: Mapping[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()
