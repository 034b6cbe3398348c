"""Binary checkpoint persistence.

Layout: magic ``BDSP``, format version (u32), tensor count (u32), then per
tensor a length-prefixed name, ndim, dims, a dtype code (0 = f64, 1 = f32),
and the little-endian row-major values. The file ends with the run config as
length-prefixed UTF-8 JSON. All integers after the magic are little-endian.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"BDSP"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_OF = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path, payload):
    """Write via a sibling temp file and rename, so readers never see a
    partial file."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, tensors, config):
    """Persist named arrays plus a JSON-serializable config mapping.

    ``tensors`` is a name -> ndarray mapping (or an iterable of pairs);
    insertion order is preserved in the file.
    """
    items = list(tensors.items()) if hasattr(tensors, "items") else list(tensors)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<I", len(items))
    for name, arr in items:
        arr = np.asarray(arr)
        if arr.dtype not in _CODE_OF:
            raise CheckpointError(
                f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw))
        out += raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        code = _CODE_OF[arr.dtype]
        out += struct.pack("<B", code)
        out += np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob))
    out += blob
    atomic_write_bytes(path, bytes(out))


class _Reader:
    def __init__(self, buf, path):
        self.buf = buf
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos}")
        piece = self.buf[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u8(self):
        return self.take(1)[0]


def load_checkpoint(path):
    """Returns (tensors dict, config dict)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        code = r.u8()
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return tensors, config


# ---------------------------------------------------------------------------
# model glue

def model_state(model):
    state = {name: p.data for name, p in model.named_parameters()}
    extra = getattr(model, "extra_state", None)
    if callable(extra):
        for name, arr in extra():
            state[name] = arr
    return state


def save_model(path, model, config):
    save_checkpoint(path, model_state(model), config)


def load_model(path, model):
    """Restore parameters (and keep-masks) in place; returns the stored
    config. Every model parameter must be present with a matching shape."""
    tensors, config = load_checkpoint(path)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"tensor {name!r}: stored shape {arr.shape} does not match "
                f"model shape {p.data.shape}")
        p.data = arr.astype(np.float64, copy=True)
    loader = getattr(model, "load_extra_state", None)
    if callable(loader):
        loader(tensors)
    return config
