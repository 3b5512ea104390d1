"""Binary checkpoint serialization.

Layout (little-endian): magic ``NUG1``, format version u32, 32-byte
config digest, then tensor records until EOF. Each record is name length
(u32), UTF-8 name, rank (u32), dims (u64 each), dtype tag (u8), raw
data. Dtype tags: 0 float32, 1 float64, 2 uint8, 3 int64. Readers reject
unknown versions and mismatched config digests.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"NUG1"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
               np.dtype(np.uint8): 2, np.dtype(np.int64): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def config_digest(*configs) -> bytes:
    text = "|".join(repr(c) for c in configs)
    return hashlib.sha256(text.encode("utf-8")).digest()


def save_tensors(path, tensors: dict[str, np.ndarray], digest: bytes) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(digest)
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                f.write(struct.pack("<Q", dim))
            f.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
            f.write(arr.tobytes())


def load_tensors(path, expected_digest: bytes | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"checkpoint: cannot read {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise CheckpointError(f"checkpoint: bad magic in {path}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint: unknown format version {version} "
                              f"(reader supports {VERSION})")
    digest = blob[8:40]
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("checkpoint: config digest mismatch "
                              "(file was written with a different configuration)")
    tensors: dict[str, np.ndarray] = {}
    off = 40
    while off < len(blob):
        try:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off) if rank else ()
            off += 8 * rank
            (tag,) = struct.unpack_from("<B", blob, off)
            off += 1
            dtype = _TAG_DTYPES.get(tag)
            if dtype is None:
                raise CheckpointError(f"checkpoint: unknown dtype tag {tag} for {name!r}")
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            raw = blob[off:off + nbytes]
            if len(raw) != nbytes:
                raise CheckpointError(f"checkpoint: truncated data for {name!r}")
            off += nbytes
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        except struct.error as exc:
            raise CheckpointError(f"checkpoint: truncated record at offset {off}") from exc
    return tensors
