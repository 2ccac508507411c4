"""Self-describing checkpoint container.

Layout: magic line, 8-byte little-endian header length, JSON header (sorted
keys; names, dtypes, shapes and byte offsets of every array, the network
config, epoch counter, optimizer scalars, RNG snapshots), then the raw array
bytes in header order.  No timestamps anywhere, so identical state produces
byte-identical files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import AdaptiveVectors, NetworkConfig, Parameters
from .numeric import AdamState

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "CheckpointFormatError"]

MAGIC = b"pvrnn-checkpoint\n"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to resume or evaluate a training run."""

    config: NetworkConfig
    params: Parameters
    adaptive: list[AdaptiveVectors] = field(default_factory=list)
    epoch: int = 0
    opt_shared: AdamState | None = None
    opt_adaptive: list[AdamState] | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)

    def params_hash(self) -> str:
        return self.params.hash()


def _adam_scalars(state: AdamState) -> dict:
    return {"t": state.t, "alpha": state.alpha, "beta1": state.beta1,
            "beta2": state.beta2, "eps": state.eps}


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = [("params", ckpt.params.flat)]
    for i, A in enumerate(ckpt.adaptive):
        arrays.append((f"A_{i:04d}", A.data))
    opt_meta: dict = {}
    if ckpt.opt_shared is not None:
        arrays.append(("opt_shared_m", ckpt.opt_shared.m))
        arrays.append(("opt_shared_v", ckpt.opt_shared.v))
        opt_meta["shared"] = _adam_scalars(ckpt.opt_shared)
    if ckpt.opt_adaptive is not None:
        opt_meta["adaptive"] = []
        for i, st in enumerate(ckpt.opt_adaptive):
            arrays.append((f"opt_A_{i:04d}_m", st.m))
            arrays.append((f"opt_A_{i:04d}_v", st.v))
            opt_meta["adaptive"].append(_adam_scalars(st))

    entries, blobs, offset = [], [], 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": offset,
                        "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "n_adaptive": len(ckpt.adaptive),
        "adaptive_T": [A.T for A in ckpt.adaptive],
        "optimizer": opt_meta,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "arrays": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (head_len,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointFormatError(
            f"{path}: unsupported format version {header.get('format_version')}")
    base = pos + head_len

    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointFormatError(f"{path}: truncated array {entry['name']!r}")
        arr = np.frombuffer(blob[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    config = NetworkConfig.from_dict(header["config"])
    params = Parameters(config, arrays["params"])
    adaptive = [AdaptiveVectors(config, T, arrays[f"A_{i:04d}"])
                for i, T in enumerate(header["adaptive_T"])]

    opt_meta = header.get("optimizer") or {}
    opt_shared = None
    if "shared" in opt_meta:
        s = opt_meta["shared"]
        opt_shared = AdamState(m=arrays["opt_shared_m"], v=arrays["opt_shared_v"],
                               t=int(s["t"]), alpha=s["alpha"], beta1=s["beta1"],
                               beta2=s["beta2"], eps=s["eps"])
    opt_adaptive = None
    if "adaptive" in opt_meta:
        opt_adaptive = []
        for i, s in enumerate(opt_meta["adaptive"]):
            opt_adaptive.append(AdamState(
                m=arrays[f"opt_A_{i:04d}_m"], v=arrays[f"opt_A_{i:04d}_v"],
                t=int(s["t"]), alpha=s["alpha"], beta1=s["beta1"],
                beta2=s["beta2"], eps=s["eps"]))

    return Checkpoint(config=config, params=params, adaptive=adaptive,
                      epoch=int(header["epoch"]), opt_shared=opt_shared,
                      opt_adaptive=opt_adaptive, rng_state=header.get("rng_state"),
                      meta=header.get("meta") or {})
