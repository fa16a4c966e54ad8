"""Checkpoint serialization (format "ckpt/v1").

Layout: an 8-byte little-endian header length, a UTF-8 JSON header, then the
flattened parameter values as little-endian float32 in manifest order. The
header carries the format version, the config hash the parameters were
trained under, and a manifest of parameter ids and shapes (sorted by id).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .layers import Param

FORMAT = "ckpt/v1"


def save_checkpoint(path: str | Path, params: dict[str, Param], config_hash: str) -> None:
    names = sorted(params)
    header = {
        "format": FORMAT,
        "config_hash": config_hash,
        "params": [{"id": n, "shape": list(params[n].data.shape)} for n in names],
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"unsupported checkpoint format: {header.get('format')!r}")
        values: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError(f"checkpoint truncated at parameter {entry['id']!r}")
            values[entry["id"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
        if f.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    return header, values


def load_into(params: dict[str, Param], path: str | Path,
              expect_config_hash: str | None = None) -> dict:
    """Load a checkpoint into live parameters, validating the manifest."""
    header, values = load_checkpoint(path)
    if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
        raise ValueError(
            f"checkpoint config hash {header['config_hash']} != expected {expect_config_hash}")
    missing = sorted(set(params) - set(values))
    extra = sorted(set(values) - set(params))
    if missing or extra:
        raise ValueError(f"parameter manifest mismatch: missing={missing} extra={extra}")
    for name, p in params.items():
        if values[name].shape != p.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{values[name].shape} != {p.data.shape}")
        p.t.data = values[name].astype(p.data.dtype)
    return header


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
