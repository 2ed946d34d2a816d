"""Versioned ``.npz`` containers for parameters and run metadata."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .autodiff import Parameter

FORMAT_VERSION = 1
_META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    """Write named arrays plus a JSON metadata header.

    The archive is built in memory with fixed member ordering so identical
    inputs give identical bytes.
    """
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    buf = io.BytesIO()
    payload = {_META_KEY: np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for k in sorted(arrays):
        payload[k] = np.ascontiguousarray(arrays[k])
    _deterministic_savez(buf, payload)
    atomic_write_bytes(path, buf.getvalue())


def _deterministic_savez(buf, payload: Mapping[str, np.ndarray]) -> None:
    import zipfile

    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            member = io.BytesIO()
            np.lib.format.write_array(member, arr, allow_pickle=False)
            zf.writestr(info, member.getvalue())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(path, allow_pickle=False) as z:
        if _META_KEY not in z.files:
            raise CheckpointError(f"{path}: missing metadata header")
        meta = json.loads(bytes(z[_META_KEY]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
        arrays = {k: z[k] for k in z.files if k != _META_KEY}
    return arrays, meta


def save_checkpoint(path, params: Sequence[Parameter], meta: Mapping[str, Any]) -> None:
    save_arrays(path, {p.name: p.data for p in params}, {"kind": "checkpoint", **meta})


def load_into(params: Sequence[Parameter], arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Copy stored values into ``params``, validating names and shapes."""
    for p in params:
        key = prefix + p.name
        if key not in arrays:
            raise CheckpointError(f"checkpoint has no parameter {key!r}")
        if arrays[key].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {arrays[key].shape}, model {p.shape}"
            )
        p.data[...] = arrays[key]
