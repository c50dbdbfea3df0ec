"""Binary checkpoint container.

Layout: 8-byte magic ``TLMCKPT1``, an 8-byte little-endian header length, a
UTF-8 JSON header (model kind, config, vocabulary hash, tensor manifest with
name/shape/dtype/offset), then the raw little-endian IEEE-754 tensor
payloads in manifest order. Saving and reloading 64-bit tensors is
bit-exact; 32-bit storage is an opt-in space saver.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .model import ModelConfig, build_model

MAGIC = b"TLMCKPT1"

_DTYPES = {"f8": "<f8", "f4": "<f4"}


def save_checkpoint(path, model, vocab_hash=None, extra=None, dtype="f8"):
    """Write a model's config and parameters to ``path``."""
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    np_dtype = np.dtype(_DTYPES[dtype])
    params = model.params()
    manifest = []
    offset = 0
    payloads = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np_dtype)
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": dtype, "offset": offset}
        )
        payloads.append(arr.tobytes())
        offset += len(payloads[-1])
    header = {
        "kind": model.cfg.variant,
        "config": model.cfg.to_dict(),
        "vocab_size": model.cfg.vocab_size,
        "vocab_sha256": vocab_hash,
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in payloads:
            fh.write(blob)


def read_header(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise DataError(f"{path}: not a {MAGIC.decode()} checkpoint")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
    return header, 16 + hlen


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, header)."""
    header, payload_start = read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    model = build_model(cfg, np.random.default_rng(0))
    params = model.params()
    with open(path, "rb") as fh:
        data = fh.read()
    for entry in header["tensors"]:
        name = entry["name"]
        if name not in params:
            raise DataError(f"{path}: unknown tensor {name!r} in manifest")
        shape = tuple(entry["shape"])
        if params[name].shape != shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {shape}, expected "
                f"{params[name].shape}"
            )
        np_dtype = np.dtype(_DTYPES[entry["dtype"]])
        start = payload_start + entry["offset"]
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            data, dtype=np_dtype, count=count, offset=start
        ).reshape(shape)
        params[name][...] = arr.astype(np.float64)
    return model, header
