"""Single-file container: magic, version, JSON header, then little-endian float64 arrays."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .events import DataError

_PREFIX = struct.Struct("<8sII")


def write_arrays(path: str | Path, magic: bytes, version: int, header: dict, arrays: dict[str, np.ndarray]) -> None:
    index = []
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(np.shape(arr))})
    meta = json.dumps({"header": header, "arrays": index}, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(_PREFIX.pack(magic.ljust(8, b"\0"), version, len(meta)))
        fh.write(meta)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_arrays(path: str | Path, magic: bytes, max_version: int) -> tuple[int, dict, dict[str, np.ndarray]]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise DataError(f"{path}: truncated file")
    got_magic, version, meta_len = _PREFIX.unpack_from(raw)
    if got_magic != magic.ljust(8, b"\0"):
        raise DataError(f"{path}: bad magic {got_magic!r}")
    if version > max_version:
        raise DataError(f"{path}: unsupported version {version}")
    pos = _PREFIX.size
    meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    arrays = {}
    for entry in meta["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 8 * count
        if pos + nbytes > len(raw):
            raise DataError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(entry["shape"]).copy()
        pos += nbytes
    return version, meta["header"], arrays


def state_dict_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state_arrays(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    state = {k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)}
    module.load_state_dict(state)
