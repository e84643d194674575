"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic       8 bytes   b"MOECHGA\\0"
    version     u32
    header_len  u32
    header      UTF-8 JSON: config text, step counter, rng state, optimizer
    n_arrays    u32
    per array:  name_len u16, name (UTF-8), ndim u8, dims u64 * ndim,
                dtype u8 (1 = float64), data (prod(dims) * 8 bytes)

Loading validates every parameter shape against the shapes implied by the
embedded configuration and returns nothing unless the whole file parses.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import CheckpointError
from ..pipeline import OptimizerState, param_shapes
from .config import ExperimentConfig, dumps_config, loads_config

MAGIC = b"MOECHGA\0"
VERSION = 1
_FLOAT64 = 1
_VELOCITY = "opt.velocity."


@dataclass
class TrainingState:
    config: ExperimentConfig
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    step: int
    rng: dict = field(default_factory=dict)


def save_checkpoint(state: TrainingState, path) -> None:
    header = json.dumps(
        {
            "config": dumps_config(state.config),
            "step": state.step,
            "rng": state.rng or {"seed": state.config["seed"], "next_step": state.step},
            "optimizer": {"kind": state.optimizer.kind, "momentum": state.optimizer.momentum},
        },
        sort_keys=True,
    ).encode("utf-8")
    arrays = dict(state.params)
    for name, v in state.optimizer.velocity.items():
        arrays[_VELOCITY + name] = v
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        value = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)) + raw_name)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(struct.pack("<B", _FLOAT64))
        chunks.append(value.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> TrainingState:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic bytes: not a checkpoint")
    version, header_len = r.unpack("<II", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (expected {VERSION})")
    try:
        header = json.loads(r.take(header_len, "header").decode("utf-8"))
        config = loads_config(header["config"])
        step = int(header["step"])
        opt = header["optimizer"]
    except CheckpointError:
        raise
    except Exception as err:
        raise CheckpointError(f"corrupt header: {err}") from err
    (count,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "array name").decode("utf-8", errors="strict")
        (ndim,) = r.unpack("<B", f"ndim of {name}")
        dims = r.unpack(f"<{ndim}Q", f"shape of {name}")
        (dtype,) = r.unpack("<B", f"dtype of {name}")
        if dtype != _FLOAT64:
            raise CheckpointError(f"array '{name}' has unsupported dtype code {dtype}")
        n = int(np.prod(dims, dtype=np.int64)) if dims else 1
        raw = r.take(8 * n, f"data of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(r.data):
        raise CheckpointError(f"{len(r.data) - r.pos} trailing bytes after last array")

    expected = param_shapes(config.model_config())
    params = {k: v for k, v in arrays.items() if not k.startswith(_VELOCITY)}
    velocity = {k[len(_VELOCITY):]: v for k, v in arrays.items() if k.startswith(_VELOCITY)}
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"shape of '{name}' is {params[name].shape}, config implies {shape}")
    for name, v in velocity.items():
        if name not in expected or v.shape != expected[name]:
            raise CheckpointError(f"optimizer state '{name}' does not match any parameter shape")
    state = OptimizerState(opt["kind"], float(opt["momentum"]), velocity, step)
    return TrainingState(config, params, state, step, header.get("rng", {}))
