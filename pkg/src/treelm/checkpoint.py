"""Self-describing binary checkpoint container.

Layout: magic, format version, creation seed, hyperparameter key-values,
vocabulary content hash, then named tensors as little-endian float64 in
row-major order.  Round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"TREELMCK"
VERSION = 1


def _write_str(fh, s):
    data = s.encode("utf-8")
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_str(fh):
    (n,) = struct.unpack("<I", fh.read(4))
    return fh.read(n).decode("utf-8")


def atomic_write(path, writer):
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, params, seed, hyper, vocab_hash):
    """params: name -> float64 ndarray; hyper: str -> str."""

    def writer(fh):
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, seed))
        fh.write(struct.pack("<I", len(hyper)))
        for key in sorted(hyper):
            _write_str(fh, key)
            _write_str(fh, str(hyper[key]))
        _write_str(fh, vocab_hash)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            _write_str(fh, name)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.astype("<f8").tobytes())

    atomic_write(path, writer)


def load_checkpoint(path):
    """Returns (params, seed, hyper, vocab_hash)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, seed = struct.unpack("<IQ", fh.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_hyper,) = struct.unpack("<I", fh.read(4))
        hyper = {}
        for _ in range(n_hyper):
            key = _read_str(fh)
            hyper[key] = _read_str(fh)
        vocab_hash = _read_str(fh)
        (n_tensors,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(n_tensors):
            name = _read_str(fh)
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8")
            params[name] = data.reshape(shape).astype(np.float64)
    return params, seed, hyper, vocab_hash
