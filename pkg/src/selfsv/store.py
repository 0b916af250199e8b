"""Single-file container for named float32 arrays plus a JSON meta block.

Layout: 4-byte magic, u32 little-endian header length, canonical JSON
header (array manifest with name/shape/offset, plus free-form ``meta``),
then one flat little-endian float32 payload.  Canonical JSON and fixed
array order make save(load(f)) byte-identical to f.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"SVT0"


class StoreFormatError(ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write named arrays (cast to float32) and meta to one file."""
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"arrays": manifest, "meta": meta or {}},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(len(header)).tobytes())
        f.write(header)
        for c in chunks:
            f.write(c)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, meta); arrays come out float32 in stored order."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise StoreFormatError(f"{path}: bad magic {raw[:4]!r}")
    hlen = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    try:
        header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise StoreFormatError(f"{path}: corrupt header") from err
    body = raw[8 + hlen :]
    payload = np.frombuffer(body[: len(body) - len(body) % 4], dtype="<f4")
    arrays = {}
    for ent in header["arrays"]:
        n = int(np.prod(ent["shape"])) if ent["shape"] else 1
        if ent["offset"] + n > payload.size:
            raise StoreFormatError(
                f"{path}: payload ends before array {ent['name']!r}"
            )
        arr = payload[ent["offset"] : ent["offset"] + n].reshape(ent["shape"])
        arrays[ent["name"]] = arr.copy()
    return arrays, header["meta"]
