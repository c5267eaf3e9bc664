"""Named-tensor checkpoint container.

Binary layout (all integers little-endian):
  magic "SGADCKPT", u32 version,
  u32 metadata length, metadata JSON bytes (phase/step counters, config hash),
  u32 tensor count, then per tensor:
    u16 name length, name UTF-8, u8 ndim, u32 dims..., float32 LE payload.

Payloads are float32. ``save_checkpoint`` therefore snaps the live (float64)
parameters onto the float32 grid before writing, so a save/load round trip
reproduces subsequent forward passes bit-exactly.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"SGADCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict):
    """Atomically write tensors + metadata; quantizes tensors to float32 in place."""
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        meta_bytes = json.dumps(meta, sort_keys=True).encode()
        f.write(struct.pack("<I", len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            t = tensors[name]
            t32 = t.astype(np.float32)
            t[...] = t32  # snap live params to the stored precision
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(t32.astype("<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; raises CheckpointError on any malformation."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    try:
        if data[:8] != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        off = 8
        (version,) = struct.unpack_from("<I", data, off); off += 4
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack_from("<I", data, off); off += 4
        meta = json.loads(data[off:off + mlen]); off += mlen
        (count,) = struct.unpack_from("<I", data, off); off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off); off += 2
            name = data[off:off + nlen].decode(); off += nlen
            (ndim,) = struct.unpack_from("<B", data, off); off += 1
            shape = struct.unpack_from(f"<{ndim}I", data, off); off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            payload = data[off:off + 4 * size]
            if len(payload) != 4 * size:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            off += 4 * size
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(float)
        if off != len(data):
            raise CheckpointError(f"{path}: trailing bytes")
        return tensors, meta
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, IndexError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint: {e}") from e
