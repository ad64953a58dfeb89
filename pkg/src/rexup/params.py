"""Named parameters, Adam, gradient clipping and the checkpoint file format.

Checkpoint layout (all integers little-endian)::

    b"RXUP" | uint32 version | uint32 header_len | header (UTF-8 JSON) | payload

The header lists ``{"name", "shape", "dtype", "offset"}`` per entry (offset is
relative to the start of the payload), ``step_count`` and a free-form ``meta``
object. The payload is raw row-major little-endian floats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError
from .tensor import DTYPES

MAGIC = b"RXUP"
FORMAT_VERSION = 1


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParamStore:
    """Ordered name -> (value, grad accumulator, Adam moments)."""

    def __init__(self, dtype: str = "float64"):
        if dtype not in DTYPES:
            raise ContractError(f"unsupported dtype {dtype!r}")
        self.dtype = dtype
        self.entries: dict[str, ParamEntry] = {}
        self.step_count = 0

    # construction -----------------------------------------------------------

    def add(self, name: str, value) -> np.ndarray:
        if name in self.entries:
            raise ContractError(f"duplicate parameter name {name!r}")
        v = np.array(value, dtype=DTYPES[self.dtype])
        self.entries[name] = ParamEntry(v, np.zeros_like(v), np.zeros_like(v), np.zeros_like(v))
        return v

    def xavier(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    def zeros(self, name: str, shape) -> np.ndarray:
        return self.add(name, np.zeros(shape))

    def constant(self, name: str, shape, fill: float) -> np.ndarray:
        return self.add(name, np.full(shape, fill))

    # access -----------------------------------------------------------------

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def value(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def grad(self, name: str) -> np.ndarray:
        return self.entries[name].grad

    def set_value(self, name: str, value) -> None:
        e = self.entries[name]
        value = np.asarray(value, dtype=e.value.dtype)
        if value.shape != e.value.shape:
            raise DimensionError(f"{name}: shape {value.shape} does not match {e.value.shape}")
        e.value[...] = value

    def accumulate(self, name: str, g: np.ndarray) -> None:
        e = self.entries[name]
        if g.shape != e.grad.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {e.grad.shape}")
        e.grad += g

    def zero_grad(self) -> None:
        for e in self.entries.values():
            e.grad.fill(0.0)

    def num_params(self) -> int:
        return int(sum(e.value.size for e in self.entries.values()))

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(e.grad.astype(np.float64) ** 2)) for e in self.entries.values())))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e.value.copy() for k, e in self.entries.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.set_value(k, v)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, e in self.entries.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(e.value).tobytes())
        return h.hexdigest()


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``."""
    norm = store.grad_norm()
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for e in store.entries.values():
            e.grad *= factor
    return norm


def adam_step(store: ParamStore, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update on every entry, then zero the gradients."""
    store.step_count += 1
    t = store.step_count
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for e in store.entries.values():
        g = e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * g * g
        e.value -= lr * (e.m / c1) / (np.sqrt(e.v / c2) + eps)
        g.fill(0.0)


# --------------------------------------------------------------------------
# checkpoint IO
# --------------------------------------------------------------------------


def checkpoint_bytes(store: ParamStore, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, e in store.entries.items():
        raw = np.ascontiguousarray(e.value, dtype=e.value.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "shape": list(e.value.shape), "dtype": str(e.value.dtype), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"entries": entries, "step_count": store.step_count, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def parse_checkpoint(blob: bytes) -> tuple[ParamStore, dict]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(blob)[12 + hlen :]
    dtypes = {e["dtype"] for e in header["entries"]}
    store = ParamStore(dtypes.pop() if len(dtypes) == 1 else "float64")
    for ent in header["entries"]:
        dt = np.dtype(ent["dtype"]).newbyteorder("<")
        count = int(np.prod(ent["shape"], dtype=np.int64))
        end = ent["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"payload truncated in entry {ent['name']!r}")
        arr = np.frombuffer(payload[ent["offset"] : end], dtype=dt).reshape(ent["shape"])
        store.add(ent["name"], arr)
    store.step_count = int(header["step_count"])
    return store, header.get("meta", {})


def save_checkpoint(path, store: ParamStore, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(store, meta))
    return path


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())


class ParamView:
    """Resolves parameter names to tape leaves, optionally under a name prefix."""

    def __init__(self, tape, store: ParamStore, prefix: str = ""):
        self.tape = tape
        self.store = store
        self.prefix = prefix

    def __call__(self, name: str):
        return self.tape.param(self.store, self.prefix + name)

    def __contains__(self, name: str) -> bool:
        return (self.prefix + name) in self.store

    def child(self, prefix: str) -> "ParamView":
        return ParamView(self.tape, self.store, self.prefix + prefix)
