"""Versioned checkpoint container: JSON header followed by raw little-endian tensors.

Layout::

    b"XLCK" | u32 version | u64 header_len | header (JSON, utf-8) | tensor bytes

The header carries the model kind, its config, arbitrary metadata (id maps,
stage history) and one entry per tensor (name, dtype, shape, offset, nbytes).
Writing the same state twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import torch

MAGIC = b"XLCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def dumps(kind: str, config: Dict[str, Any], state: Dict[str, torch.Tensor],
          meta: Dict[str, Any] | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "config": config, "meta": meta or {}, "tensors": entries},
                        sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(blobs)


def loads(blob: bytes) -> Tuple[str, Dict[str, Any], Dict[str, torch.Tensor], Dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    header = json.loads(blob[start:start + hlen])
    base = start + hlen
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=base + e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return header["kind"], header["config"], state, header["meta"]


def save(path, kind, config, state, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(kind, config, state, meta))
    return path


def load(path):
    return loads(Path(path).read_bytes())


def save_tts(path, model, meta=None) -> Path:
    from dataclasses import asdict
    meta = {"stage_history": list(getattr(model, "stage_history", [])), **(meta or {})}
    return save(path, "tts", asdict(model.config), model.state_dict(), meta)


def load_tts(path):
    from .ttsmodel import ModelConfig, TtsModel
    kind, config, state, meta = load(path)
    if kind != "tts":
        raise CheckpointError(f"{path}: expected a tts checkpoint, got {kind!r}")
    model = TtsModel(ModelConfig(**config))
    model.load_state_dict(state)
    model.stage_history = list(meta.get("stage_history", []))
    model.meta = meta
    return model.eval()


def save_xvec(path, xvec, meta=None) -> Path:
    from dataclasses import asdict
    meta = {"stage_history": list(getattr(xvec, "stage_history", [])), **(meta or {})}
    return save(path, "xvector", asdict(xvec.config), xvec.state_dict(), meta)


def load_xvec(path):
    from .spkembed import XVectorConfig, XVectorModel
    kind, config, state, meta = load(path)
    if kind != "xvector":
        raise CheckpointError(f"{path}: expected an xvector checkpoint, got {kind!r}")
    config["contexts"] = tuple(config["contexts"])
    xvec = XVectorModel(XVectorConfig(**config))
    xvec.load_state_dict(state)
    xvec.stage_history = list(meta.get("stage_history", []))
    xvec.meta = meta
    return xvec.eval()
