"""Binary containers for parameters (``UGT1``) and preprocessing sidecars (``UGTS``).

Both share one layout::

    magic (4 bytes) | header length (uint32 LE) | JSON header (UTF-8) | payload

The header lists every array (name, dtype, shape, offset, nbytes) plus a
SHA-256 of the payload, so a load verifies integrity before decoding.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

CKPT_MAGIC = b"UGT1"
SIDECAR_MAGIC = b"UGTS"
FORMAT_VERSION = 1

_DTYPES = {"f4": "<f4", "f8": "<f8", "i4": "<i4", "i8": "<i8"}


def _encode(magic: bytes, arrays: dict[str, np.ndarray], meta: dict, dtypes: dict | None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = (dtypes or {}).get(name)
        if code is None:
            code = "f8" if arr.dtype.kind == "f" else "i8"
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": FORMAT_VERSION, "arrays": entries, "meta": meta,
              "sha256": hashlib.sha256(payload).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return magic + struct.pack("<I", len(hbytes)) + hbytes + payload


def _decode(blob: bytes, magic: bytes, path) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:4] != magic:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('version')}")
    payload = blob[8 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise DataError(f"{path}: payload hash mismatch (corrupted file)")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, params: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> str:
    """Write parameters in name order (float64). Returns the config hash."""
    h = config_hash(config)
    meta = {"config": config, "config_hash": h, **(extra or {})}
    atomic_write(path, _encode(CKPT_MAGIC, dict(params), meta, {k: "f8" for k in params}))
    return h


def load_checkpoint(path, expected_config: dict | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; with ``expected_config`` the stored config hash must match."""
    arrays, meta = _decode(Path(path).read_bytes(), CKPT_MAGIC, path)
    if expected_config is not None and config_hash(expected_config) != meta["config_hash"]:
        raise ConfigError(f"{path}: checkpoint config hash {meta['config_hash']} does not match "
                          f"current config {config_hash(expected_config)}")
    return arrays, meta


def save_sidecar(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Floats as little-endian f32, integer arrays as i4."""
    codes = {k: ("f4" if np.asarray(v).dtype.kind == "f" else "i4") for k, v in arrays.items()}
    atomic_write(path, _encode(SIDECAR_MAGIC, arrays, meta, codes))


def load_sidecar(path) -> tuple[dict[str, np.ndarray], dict]:
    return _decode(Path(path).read_bytes(), SIDECAR_MAGIC, path)
