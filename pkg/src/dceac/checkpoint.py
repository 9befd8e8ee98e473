"""Checkpoint files.

Layout::

    b"DCEACKPT"                 8-byte magic
    uint64 little-endian        length of the JSON header in bytes
    JSON header (UTF-8)         {"config": ..., "entries": [{"name", "shape", "dtype"}], "meta": ...}
    payloads                    raw little-endian float32 arrays, in header order
"""

from __future__ import annotations

import json
import struct

import numpy as np

from dceac.network import ArchitectureConfig, ModelParams
from dceac.utils import atomic_write

MAGIC = b"DCEACKPT"
DTYPE = "<f4"
_OPT_GRAD = "optim.sq_grad/"
_OPT_UPDATE = "optim.sq_update/"


def to_bytes(params, meta=None, optimizer=None):
    entries = dict(params.arrays())
    if optimizer is not None:
        for k, v in optimizer.sq_grad.items():
            entries[_OPT_GRAD + k] = v
        for k, v in optimizer.sq_update.items():
            entries[_OPT_UPDATE + k] = v
    header = {
        "format": "dceac-checkpoint",
        "version": 1,
        "config": params.config.to_dict(),
        "weights": list(params.weights),
        "buffers": list(params.buffers),
        "entries": [{"name": k, "shape": list(v.shape), "dtype": DTYPE} for k, v in entries.items()],
        "meta": meta or {},
    }
    if optimizer is not None:
        header["optimizer"] = {"rho": optimizer.rho, "eps": optimizer.eps, "lr": optimizer.lr}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [MAGIC, struct.pack("<Q", len(raw)), raw]
    for v in entries.values():
        if not np.all(np.isfinite(v)):
            raise ValueError("refusing to write non-finite parameters")
        chunks.append(np.ascontiguousarray(v, dtype=DTYPE).tobytes())
    return b"".join(chunks)


def from_bytes(blob):
    """Returns ``(params, meta, optimizer_or_None)``."""
    from dceac.autodiff.optim import AdadeltaState

    if blob[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + n].decode("utf-8"))
    offset = 16 + n
    arrays = {}
    for e in header["entries"]:
        if e["dtype"] != DTYPE:
            raise ValueError(f"unsupported dtype {e['dtype']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(blob, dtype=DTYPE, count=count, offset=offset).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.float32)
        offset += 4 * count
    if offset != len(blob):
        raise ValueError("trailing or missing payload bytes")
    config = ArchitectureConfig.from_dict(header["config"])
    params = ModelParams(
        config,
        {k: arrays[k] for k in header["weights"]},
        {k: arrays[k] for k in header["buffers"]},
        arrays.get("cluster.centers"),
    )
    optimizer = None
    if "optimizer" in header:
        o = header["optimizer"]
        optimizer = AdadeltaState(
            o["rho"], o["eps"], o["lr"],
            {k[len(_OPT_GRAD):]: v for k, v in arrays.items() if k.startswith(_OPT_GRAD)},
            {k[len(_OPT_UPDATE):]: v for k, v in arrays.items() if k.startswith(_OPT_UPDATE)},
        )
    return params, header.get("meta", {}), optimizer


def save(path, params, meta=None, optimizer=None):
    blob = to_bytes(params, meta, optimizer)
    with atomic_write(path, "wb") as fh:
        fh.write(blob)


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
