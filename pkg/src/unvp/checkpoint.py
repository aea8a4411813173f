"""Training-state persistence.

Checkpoint container (little-endian)::

    magic     8 bytes  b"UNVPCKPT"
    version   u32
    nseg      u32
    nseg x [ name_len u16, name (ASCII), length u64, payload ]
    checksum  32 bytes SHA-256 of everything above

Segment ``meta`` is canonical JSON (config echo, seed, counters, shapes,
descriptors, metrics history). The array segments (``classifier``, ``flow``,
``priors``, ``optimizer``, ``pool``) are ``u32 index_len, JSON index of
(name, dtype, shape), raw array bytes`` in index order.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import ChecksumError, FormatVersionError, atomic_write
from .flow import ActNorm
from .generalizer import HardSamplePool, TrainState
from .preprocessing import Preprocessor

CKPT_MAGIC = b"UNVPCKPT"
CKPT_VERSION = 1


def _pack_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    index, chunks = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = "<i8" if arr.dtype.kind in "iu" else "<f8"
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    head = json.dumps(index, sort_keys=True, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + b"".join(chunks)


def _unpack_arrays(blob: bytes) -> dict[str, np.ndarray]:
    (n,) = struct.unpack_from("<I", blob, 0)
    index = json.loads(blob[4 : 4 + n])
    off = 4 + n
    out = {}
    for item in index:
        count = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(blob, dtype=item["dtype"], count=count, offset=off).reshape(item["shape"])
        out[item["name"]] = arr.copy()
        off += 8 * count
    return out


def _meta(state: TrainState) -> dict:
    return {
        "format_version": CKPT_VERSION,
        "seed": state.config.seed,
        "config": state.config.to_dict(),
        "input_shape": list(state.input_shape),
        "n_classes": state.n_classes,
        "preprocessor": state.preprocessor.to_dict(),
        "classifier": state.clf.descriptor(),
        "flow": state.flow.descriptor() if state.flow is not None else None,
        "priors": state.priors.descriptor() if state.priors is not None else None,
        "actnorm_initialized": bool(state.flow is not None and state.flow.initialized),
        "counters": {"pretrain_done": state.pretrain_done, "epoch": state.epoch, "phases_done": state.phases_done},
        "history": state.history,
    }


def dumps_checkpoint(state: TrainState) -> bytes:
    px, py, pr = state.pool.arrays(state.dim)
    optim = {f"clf.{k}": v for k, v in state.opt_clf.state_arrays().items()}
    if state.opt_flow is not None:
        optim.update({f"flow.{k}": v for k, v in state.opt_flow.state_arrays().items()})
    segments = [
        ("meta", json.dumps(_meta(state), sort_keys=True, separators=(",", ":")).encode("utf-8")),
        ("classifier", _pack_arrays(state.clf.state_dict())),
        ("flow", _pack_arrays(state.flow.state_dict() if state.flow is not None else {})),
        ("priors", _pack_arrays(state.priors.state_dict() if state.priors is not None else {})),
        ("optimizer", _pack_arrays(optim)),
        ("pool", _pack_arrays({"x": px, "labels": py, "rounds": pr})),
    ]
    blob = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(segments))
    for name, payload in segments:
        key = name.encode("ascii")
        blob += struct.pack("<H", len(key)) + key + struct.pack("<Q", len(payload)) + payload
    return blob + hashlib.sha256(blob).digest()


def loads_checkpoint(blob: bytes) -> TrainState:
    if len(blob) < 48 or blob[:8] != CKPT_MAGIC:
        raise ChecksumError("not a checkpoint (bad magic or truncated)")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")
    version, nseg = struct.unpack_from("<II", payload, 8)
    if version != CKPT_VERSION:
        raise FormatVersionError(f"checkpoint format version {version} does not match supported version {CKPT_VERSION}")
    off = 16
    segments = {}
    for _ in range(nseg):
        (n,) = struct.unpack_from("<H", payload, off)
        name = payload[off + 2 : off + 2 + n].decode("ascii")
        off += 2 + n
        (length,) = struct.unpack_from("<Q", payload, off)
        off += 8
        segments[name] = payload[off : off + length]
        off += length

    meta = json.loads(segments["meta"].decode("utf-8"))
    config = RunConfig.from_dict(meta["config"])
    state = TrainState.create(config, tuple(meta["input_shape"]), meta["n_classes"], Preprocessor(**meta["preprocessor"]))
    state.clf.load_state_dict(_unpack_arrays(segments["classifier"]))
    if state.flow is not None:
        state.flow.load_state_dict(_unpack_arrays(segments["flow"]))
        state.priors.load_state_dict(_unpack_arrays(segments["priors"]))
        if meta["actnorm_initialized"]:
            state.flow.mark_initialized()
    optim = _unpack_arrays(segments["optimizer"])
    state.opt_clf.load_state_arrays({k[4:]: v for k, v in optim.items() if k.startswith("clf.")})
    if state.opt_flow is not None:
        state.opt_flow.load_state_arrays({k[5:]: v for k, v in optim.items() if k.startswith("flow.")})
    pool = _unpack_arrays(segments["pool"])
    state.pool = HardSamplePool()
    for r in np.unique(pool["rounds"]):
        sel = pool["rounds"] == r
        state.pool.add(pool["x"][sel], pool["labels"][sel], int(r))
    counters = meta["counters"]
    state.pretrain_done = counters["pretrain_done"]
    state.epoch = counters["epoch"]
    state.phases_done = counters["phases_done"]
    state.history = meta["history"]
    return state


def save_checkpoint(state: TrainState, path) -> Path:
    return atomic_write(path, dumps_checkpoint(state))


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return loads_checkpoint(path.read_bytes())
