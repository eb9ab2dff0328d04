"""Single-file checkpoints.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"OPCK"
    4       4     u32 format version (currently 1)
    8       8     u64 header length L
    16      L     UTF-8 JSON header
    16+L    ...   raw float64 little-endian arrays, concatenated in the
                  order of header["arrays"]

The header is ``{"meta": {...}, "arrays": [{"name", "kind", "shape"}...],
"adam_steps": {param_name: int}}``. ``kind`` is one of ``param``,
``buffer``, ``adam_m`` or ``adam_v``; optimizer moments follow their
parameters. ``meta`` carries free-form run information, including the model
architecture config that loaders compare against.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .optim import ParamRegistry

MAGIC = b"OPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(
    path: str | Path,
    registries: Mapping[str, ParamRegistry],
    buffers: Mapping[str, np.ndarray],
    meta: Mapping[str, Any],
) -> None:
    arrays: list[tuple[str, str, np.ndarray]] = []
    steps: dict[str, int] = {}
    for rname, reg in registries.items():
        for pname, t in reg.items():
            full = f"{rname}/{pname}"
            arrays.append((full, "param", t.data))
            st = reg.state_of(pname)
            if st.m is not None:
                arrays.append((full, "adam_m", st.m))
                arrays.append((full, "adam_v", st.v))
                steps[full] = st.step
    for bname, b in buffers.items():
        arrays.append((bname, "buffer", b))
    header = {
        "meta": dict(meta),
        "arrays": [{"name": n, "kind": k, "shape": list(a.shape)} for n, k, a in arrays],
        "adam_steps": steps,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[tuple[str, str], np.ndarray]]:
    """Return (header, {(name, kind): array})."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    offset = 16 + hlen
    out: dict[tuple[str, str], np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).astype(np.float64)
        out[(entry["name"], entry["kind"])] = a.reshape(shape)
        offset += 8 * n
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, out


def load_checkpoint(
    path: str | Path,
    registries: Mapping[str, ParamRegistry],
    buffers: Mapping[str, np.ndarray],
    with_optimizer: bool = True,
) -> dict:
    """Restore parameters, buffers and (optionally) Adam state in place.

    Every parameter and buffer the caller expects must be present with the
    same shape; anything else is a hard error. Returns the header ``meta``.
    """
    header, arrays = read_checkpoint(path)
    for rname, reg in registries.items():
        for pname, t in reg.items():
            full = f"{rname}/{pname}"
            a = arrays.get((full, "param"))
            if a is None:
                raise CheckpointError(f"{path}: missing parameter {full}")
            if a.shape != t.shape:
                raise CheckpointError(f"{path}: {full} has shape {a.shape}, model expects {t.shape}")
            t.data[...] = a
            st = reg.state_of(pname)
            if with_optimizer and (full, "adam_m") in arrays:
                st.m = arrays[(full, "adam_m")].copy()
                st.v = arrays[(full, "adam_v")].copy()
                st.step = int(header["adam_steps"][full])
            elif with_optimizer:
                st.m = st.v = None
                st.step = 0
    for bname, b in buffers.items():
        a = arrays.get((bname, "buffer"))
        if a is None or a.shape != b.shape:
            raise CheckpointError(f"{path}: buffer {bname} missing or mis-shaped")
        b[...] = a
    expected = {f"{r}/{p}" for r, reg in registries.items() for p in reg.names()}
    extra = {n for (n, k) in arrays if k == "param"} - expected
    if extra:
        raise CheckpointError(f"{path}: unexpected parameters {sorted(extra)[:5]}")
    return header["meta"]
