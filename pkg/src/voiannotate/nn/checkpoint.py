"""Checkpoint serialization.

Layout (byte exact): the ASCII line ``#voi-ckpt v1\\n``, then any number of
metadata lines ``#meta <key> <value>\\n``, then per-parameter records -- an
ASCII line ``param <name> <ndim> <d0> <d1> ...\\n`` immediately followed by
the row-major little-endian float32 payload of prod(shape) values. Parameter
order is the registration order of the store, so identical models produce
identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..geometry import VoiError
from .layers import ParameterStore

MAGIC = b"#voi-ckpt v1\n"


def save_checkpoint(store: ParameterStore, path, meta: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        for key, value in (meta or {}).items():
            text = f"#meta {key} {value}"
            if "\n" in text:
                raise VoiError("checkpoint metadata must be single-line")
            f.write(text.encode() + b"\n")
        for name, tensor in store.params.items():
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            dims = " ".join(str(d) for d in arr.shape)
            f.write(f"param {name} {arr.ndim}{' ' + dims if dims else ''}\n".encode())
            f.write(arr.tobytes())


def _read_line(f):
    chunk = bytearray()
    while True:
        b = f.read(1)
        if not b:
            return bytes(chunk) if chunk else None
        if b == b"\n":
            return bytes(chunk)
        chunk += b


def load_checkpoint(path):
    """Returns (values, meta): parameter name -> float32 array, plus the
    metadata key -> value mapping."""
    path = Path(path)
    with open(path, "rb") as f:
        first = _read_line(f)
        if first is None or first + b"\n" != MAGIC:
            raise VoiError(f"{path}: not a checkpoint file")
        meta = {}
        values = {}
        while True:
            line = _read_line(f)
            if line is None:
                break
            text = line.decode()
            if text.startswith("#meta "):
                _, key, value = text.split(" ", 2)
                meta[key] = value
                continue
            if not text.startswith("param "):
                raise VoiError(f"{path}: unexpected record '{text[:40]}'")
            parts = text.split(" ")
            name = parts[1]
            ndim = int(parts[2])
            shape = tuple(int(d) for d in parts[3 : 3 + ndim])
            count = int(np.prod(shape)) if shape else 1
            payload = f.read(count * 4)
            if len(payload) != count * 4:
                raise VoiError(f"{path}: truncated payload for '{name}'")
            values[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return values, meta
