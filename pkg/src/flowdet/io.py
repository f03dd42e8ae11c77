"""File formats: raw tensors, parameter checkpoints, key=value configs."""

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

TENSOR_MAGIC = b"TNSR"
CHECKPOINT_MAGIC = b"FDCP"
CHECKPOINT_VERSION = 1


def save_tensor(path_or_file, array):
    """Write one 4-D tensor: magic, 4 little-endian u32 dims, float32 payload."""
    array = array.data if isinstance(array, Tensor) else np.asarray(array)
    if array.ndim != 4:
        raise ValueError(f"save_tensor: expected 4-D array, got shape {array.shape}")
    close = False
    f = path_or_file
    if not hasattr(f, "write"):
        f = open(f, "wb")
        close = True
    try:
        f.write(TENSOR_MAGIC)
        f.write(struct.pack("<4I", *array.shape))
        f.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    finally:
        if close:
            f.close()


def load_tensor(path_or_file):
    close = False
    f = path_or_file
    if not hasattr(f, "read"):
        f = open(f, "rb")
        close = True
    try:
        magic = f.read(4)
        if magic != TENSOR_MAGIC:
            raise ValueError(f"bad tensor file magic {magic!r}, expected {TENSOR_MAGIC!r}")
        dims = struct.unpack("<4I", f.read(16))
        count = int(np.prod(dims))
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"truncated tensor payload: wanted {4 * count} bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    finally:
        if close:
            f.close()


def iter_tensor_stream(path):
    """Yield tensors from a file of back-to-back TNSR records."""
    with open(path, "rb") as f:
        while True:
            magic = f.read(4)
            if not magic:
                return
            if magic != TENSOR_MAGIC:
                raise ValueError(f"bad stream record magic {magic!r} in {path}")
            dims = struct.unpack("<4I", f.read(16))
            count = int(np.prod(dims))
            payload = f.read(4 * count)
            if len(payload) != 4 * count:
                raise ValueError(f"truncated record in {path}")
            yield np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_checkpoint(path, params):
    """Write an ordered (name, shape, float32 data) parameter list."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, value in params.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered dict of name -> float32 array."""
    params = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r} in {path}")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", f.read(4))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            data = np.frombuffer(f.read(4 * int(np.prod(shape))), dtype="<f4")
            params[name] = data.reshape(shape).copy()
    return params


def params_to_tensors(raw, requires_grad=False):
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in raw.items()}


def parse_config(path):
    """Plain `key = value` config file; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def load_class_names(path):
    names = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not names:
        raise ValueError(f"class-name list {path} is empty")
    return names
