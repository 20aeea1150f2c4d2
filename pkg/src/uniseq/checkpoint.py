"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"UMMC" | u32 version | u32 n | n bytes of UTF-8 JSON header
    u32 section count
    per section:  u32 name length | name | u32 record count | records
    per record:   u32 name length | name | u8 rank | rank x u64 dims | u8 dtype | raw data

dtype 1 is float64, dtype 2 is uint64. Sections are ``params``, ``optimizer``,
``rng`` and ``history``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError, CheckpointError, CompatibilityError, TruncatedFileError, VersionMismatchError,
)
from .io_utils import atomic_write_bytes
from .model import ModelConfig, Parameters, param_shapes
from .numerics import AdamState, Tensor

MAGIC = b"UMMC"
VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<u8")}
_CODES = {np.dtype("<f8"): 1, np.dtype("<u8"): 2}
_MASK64 = (1 << 64) - 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Parameters
    adam: AdamState
    rng_state: dict | None = None
    step: int = 0
    provenance: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)


# -- rng state <-> u64 words ----------------------------------------------------

def _rng_words(state: dict) -> np.ndarray:
    if state["bit_generator"] != "PCG64":
        raise CheckpointError(f"unsupported bit generator {state['bit_generator']}")
    s, inc = state["state"]["state"], state["state"]["inc"]
    return np.array([s & _MASK64, s >> 64, inc & _MASK64, inc >> 64,
                     state["has_uint32"], state["uinteger"]], dtype="<u8")


def _rng_state(words: np.ndarray) -> dict:
    w = [int(x) for x in words]
    return {"bit_generator": "PCG64",
            "state": {"state": w[0] | (w[1] << 64), "inc": w[2] | (w[3] << 64)},
            "has_uint32": w[4], "uinteger": w[5]}


# -- encoding ----------------------------------------------------------------

def _name(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dtype = np.dtype("<u8") if arr.dtype.kind == "u" else np.dtype("<f8")
    arr = np.array(arr, dtype=dtype, order="C")
    head = _name(name) + struct.pack("<B", arr.ndim)
    head += b"".join(struct.pack("<Q", d) for d in arr.shape)
    return head + struct.pack("<B", _CODES[dtype]) + arr.tobytes()


def _section(name: str, records: list[tuple[str, np.ndarray]]) -> bytes:
    return _name(name) + struct.pack("<I", len(records)) + b"".join(_record(n, a) for n, a in records)


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step,
                         "provenance": ckpt.provenance}, sort_keys=True).encode("utf-8")
    params = [(n, t.data) for n, t in ckpt.params.items()]
    adam = ckpt.adam
    opt = [("lr", np.float64(adam.lr)), ("beta1", np.float64(adam.beta1)),
           ("beta2", np.float64(adam.beta2)), ("eps", np.float64(adam.eps)),
           ("step", np.uint64(adam.step))]
    opt += [(f"adam.m.{n}", m) for n, m in adam.m.items()]
    opt += [(f"adam.v.{n}", v) for n, v in adam.v.items()]
    rng = [("pcg64", _rng_words(ckpt.rng_state))] if ckpt.rng_state is not None else []
    history = [("loss", np.asarray(ckpt.history, dtype=np.float64))]
    sections = [("params", params), ("optimizer", opt), ("rng", rng), ("history", history)]
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(sections))]
    out += [_section(n, r) for n, r in sections]
    return b"".join(out)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, dumps_checkpoint(ckpt))


# -- decoding ----------------------------------------------------------------

class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def record(self) -> tuple[str, np.ndarray]:
        name = self.name()
        (rank,) = self.unpack("<B")
        dims = self.unpack(f"<{rank}Q") if rank else ()
        (code,) = self.unpack("<B")
        if code not in _DTYPES:
            raise CheckpointError(f"record {name!r} has unknown dtype code {code}")
        dtype = _DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(self.take(count * dtype.itemsize), dtype=dtype).reshape(dims)
        return name, arr.astype(dtype.newbyteorder("="), copy=True)


def check_compatible(config: ModelConfig, shapes: dict[str, tuple]) -> None:
    """Raise CompatibilityError naming the first tensor whose shape disagrees with ``config``."""
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in shapes:
            raise CompatibilityError(f"tensor {name!r} missing from checkpoint")
        if tuple(shapes[name]) != tuple(shape):
            raise CompatibilityError(f"tensor {name!r} has shape {tuple(shapes[name])}, config expects {shape}")
    for name in shapes:
        if name not in expected:
            raise CompatibilityError(f"tensor {name!r} is not part of the configured model")


def loads_checkpoint(data: bytes, expect: ModelConfig | None = None) -> Checkpoint:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.take(4)
    version, n = r.unpack("<II")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, this build reads {VERSION}")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = ModelConfig.from_dict(header["config"])
    (count,) = r.unpack("<I")
    sections: dict[str, dict[str, np.ndarray]] = {}
    for _ in range(count):
        name = r.name()
        (records,) = r.unpack("<I")
        sections[name] = dict(r.record() for _ in range(records))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after last section")
    for required in ("params", "optimizer", "rng", "history"):
        if required not in sections:
            raise TruncatedFileError(f"checkpoint lacks the {required!r} section")

    tensors = sections["params"]
    check_compatible(config, {k: v.shape for k, v in tensors.items()})
    if expect is not None:
        check_compatible(expect, {k: v.shape for k, v in tensors.items()})
        if expect != config:
            diff = [k for k, v in expect.to_dict().items() if header["config"][k] != v]
            raise CompatibilityError(f"config field {diff[0]!r} differs from the checkpoint")
    params = Parameters(config)
    for name in param_shapes(config):
        params[name] = Tensor(tensors[name], requires_grad=True)

    opt = sections["optimizer"]
    adam = AdamState(lr=float(opt["lr"]), beta1=float(opt["beta1"]), beta2=float(opt["beta2"]),
                     eps=float(opt["eps"]), step=int(opt["step"]))
    for key, arr in opt.items():
        if key.startswith("adam.m."):
            adam.m[key[7:]] = arr
        elif key.startswith("adam.v."):
            adam.v[key[7:]] = arr
    rng = sections["rng"].get("pcg64")
    return Checkpoint(config=config, params=params, adam=adam,
                      rng_state=_rng_state(rng) if rng is not None else None,
                      step=int(header["step"]), provenance=header.get("provenance", {}),
                      history=[float(x) for x in sections["history"].get("loss", [])])


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes(), expect)
