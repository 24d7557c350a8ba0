"""Binary checkpoints: named float32 tensor records plus a config snapshot
and JSON metadata (RNG state, optimizer step counts, training progress).

Layout, little-endian throughout:

    magic   4 bytes  "FGPV"
    version u32      (currently 1)
    conf_len u32, config text (utf-8)
    meta_len u32, metadata JSON (utf-8)
    count   u32      number of tensor records
    record: name_len u16, name utf-8, rank u8, dims u32 x rank,
            payload float32 x prod(dims)

Values round-trip exactly after single-precision rounding; training applies
the same rounding to its live state at every checkpoint boundary so a
resumed run continues bit-identically to an unbroken one.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"FGPV"
VERSION = 1


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], config_text: str,
                    meta: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        conf = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(conf)))
        fh.write(conf)
        meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            a = np.asarray(arr)
            fh.write(struct.pack("<B", a.ndim))
            for dim in a.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(a.astype("<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def load_checkpoint(path: str) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Returns (config text, metadata, name -> float64 array)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, "
                              f"expected {VERSION}")
    config_text = r.take(r.unpack("<I")).decode("utf-8")
    meta = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    count = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        rank = r.unpack("<B")
        dims = tuple(r.unpack("<I") for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        payload = np.frombuffer(r.take(4 * n), dtype="<f4")
        tensors[name] = payload.astype(np.float64).reshape(dims)
    return config_text, meta, tensors


def rng_state_to_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_json(state: dict) -> np.random.Generator:
    bitgen_name = state.get("bit_generator", "PCG64")
    bitgen = getattr(np.random, bitgen_name)()
    bitgen.state = state
    return np.random.Generator(bitgen)
