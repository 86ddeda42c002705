"""Read/write the project tensor container (``SFCT0001``).

Layout: 8 magic bytes, an unsigned 64-bit little-endian header length, a UTF-8
JSON header mapping tensor name to ``{dtype, shape, offset, nbytes}``, then the
raw little-endian element data. Offsets are relative to the start of the data
section. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SFCT0001"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class ContainerError(ValueError):
    pass


def companion(path: str | Path, suffix: str) -> Path:
    """``path`` with ``suffix`` appended, after dropping a trailing ``.sfct`` or ``.json``.

    Names like ``resid.0`` keep their dot, unlike ``Path.with_suffix``.
    """
    p = Path(path)
    if p.suffix in (".sfct", ".json"):
        p = p.with_suffix("")
    return p.with_name(p.name + suffix)


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        kind = arr.dtype.name
        if kind not in _DTYPES:
            raise ContainerError(f"{name}: unsupported dtype {kind}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
        header[name] = {"dtype": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in chunks:
            fh.write(raw)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:8]!r}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    out = {}
    for name, meta in header.items():
        dt = np.dtype(_DTYPES[meta["dtype"]])
        start = base + meta["offset"]
        data = blob[start : start + meta["nbytes"]]
        if len(data) != meta["nbytes"]:
            raise ContainerError(f"{path}: truncated tensor {name!r}")
        arr = np.frombuffer(data, dtype=dt).reshape(meta["shape"])
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return out
