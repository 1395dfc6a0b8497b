"""Single-file binary checkpoints.

Layout: an ASCII magic line, a little-endian uint32 version, a
length-prefixed JSON text header (run config, optimizer scalars, best-metric
record), then length-prefixed named tensor blobs as raw little-endian
IEEE-754.  Round trips are bit-exact by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .optim import TrainState

MAGIC = b"HCN-CKPT\n"
VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4")}


@dataclass
class Checkpoint:
    config: dict
    train_state: dict = field(default_factory=dict)
    best: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    version: int = VERSION


def train_state_to_dict(state: TrainState) -> dict:
    return {
        "base_lr": state.base_lr,
        "decay_rate": state.decay_rate,
        "decay_every": state.decay_every,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "seed": state.seed,
        "step": state.step,
        "weight_decay": dict(state.weight_decay),
    }


def train_state_from_dict(raw: dict, moments: dict | None = None) -> TrainState:
    state = TrainState(
        base_lr=raw["base_lr"],
        decay_rate=raw["decay_rate"],
        decay_every=raw["decay_every"],
        beta1=raw["beta1"],
        beta2=raw["beta2"],
        eps=raw["eps"],
        seed=raw["seed"],
        step=raw["step"],
        weight_decay=dict(raw.get("weight_decay", {})),
    )
    if moments:
        for key, arr in moments.items():
            kind, name = key.split(".", 1)
            (state.m if kind == "m" else state.v)[name] = arr.copy()
    return state


def moment_tensors(state: TrainState) -> dict:
    out = {}
    for name, arr in state.m.items():
        out[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam.v.{name}"] = arr
    return out


def split_moments(tensors: dict) -> tuple[dict, dict]:
    """Separate parameter blobs from optimizer-moment blobs."""
    params, moments = {}, {}
    for name, arr in tensors.items():
        if name.startswith("adam."):
            moments[name[len("adam."):]] = arr
        else:
            params[name] = arr
    return params, moments


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    header = json.dumps(
        {
            "config": checkpoint.config,
            "train_state": checkpoint.train_state,
            "best": checkpoint.best,
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", checkpoint.version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(checkpoint.tensors)))
        for name, arr in checkpoint.tensors.items():
            arr = np.asarray(arr)
            code = "<f4" if arr.dtype == np.float32 else "<f8"
            data = np.ascontiguousarray(arr.astype(code, copy=False))
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            code_b = code.encode("ascii")
            fh.write(struct.pack("<B", len(code_b)))
            fh.write(code_b)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}q", *data.shape))
            blob = data.tobytes()
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def _read(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return blob


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        version = struct.unpack("<I", _read(fh, 4, "version"))[0]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (supported: {VERSION})")
        header_len = struct.unpack("<I", _read(fh, 4, "header length"))[0]
        try:
            header = json.loads(_read(fh, header_len, "header").decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        count = struct.unpack("<I", _read(fh, 4, "tensor count"))[0]
        tensors = {}
        for _ in range(count):
            name_len = struct.unpack("<H", _read(fh, 2, "name length"))[0]
            name = _read(fh, name_len, "name").decode("utf-8")
            code_len = struct.unpack("<B", _read(fh, 1, "dtype length"))[0]
            code = _read(fh, code_len, "dtype").decode("ascii")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r} has unsupported dtype {code!r}")
            ndim = struct.unpack("<B", _read(fh, 1, "rank"))[0]
            shape = struct.unpack(f"<{ndim}q", _read(fh, 8 * ndim, "shape")) if ndim else ()
            nbytes = struct.unpack("<Q", _read(fh, 8, "payload size"))[0]
            blob = _read(fh, nbytes, f"tensor {name!r}")
            arr = np.frombuffer(blob, dtype=_DTYPES[code]).reshape(shape)
            tensors[name] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(
        config=header.get("config", {}),
        train_state=header.get("train_state", {}),
        best=header.get("best", {}),
        tensors=tensors,
        version=version,
    )
