"""Binary checkpoints.

Layout::

    TAUCKPT1\\n
    <one line of ASCII JSON header>\\n
    <raw little-endian arrays, concatenated in header order>

The header carries the format version, epoch counter, rng state, a config echo
and one entry per array: ``name``, ``section`` (param | buffer | momentum),
``shape``, ``dtype`` ("<f4" or "<f8"), ``offset`` and ``nbytes`` into the blob.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TAUCKPT1\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def model_state(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.buffers}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for section, arrays in (("param", ckpt.params), ("buffer", ckpt.buffers), ("momentum", ckpt.momentum)):
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dt = "<f8" if arr.dtype == np.float64 else "<f4"
            raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
            entries.append({"name": name, "section": section, "shape": list(arr.shape), "dtype": dt, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "version": VERSION,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "config": ckpt.config,
        "extra": ckpt.extra,
        "entries": entries,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("ascii")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(MAGIC + line + b"\n" + b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    buf = path.read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    end = buf.index(b"\n", len(MAGIC))
    header = json.loads(buf[len(MAGIC) : end].decode("ascii"))
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    blob = memoryview(buf)[end + 1 :]
    sections: dict[str, dict[str, np.ndarray]] = {"param": {}, "buffer": {}, "momentum": {}}
    for e in header["entries"]:
        if e["offset"] + e["nbytes"] > len(blob):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(blob[e["offset"] : e["offset"] + e["nbytes"]], dtype=e["dtype"])
        native = np.float64 if e["dtype"] == "<f8" else np.float32
        sections[e["section"]][e["name"]] = arr.reshape(e["shape"]).astype(native)
    return Checkpoint(
        sections["param"],
        sections["buffer"],
        sections["momentum"],
        header["epoch"],
        header["rng_state"],
        header["config"],
        header.get("extra", {}),
    )
