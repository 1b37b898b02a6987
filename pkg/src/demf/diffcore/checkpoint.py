"""Binary parameter checkpoints.

Layout (little-endian): ``b"DEMF"``, u32 format version, then per parameter
u32 name length, UTF-8 name, u32 rank, u64 extents, float64 payload.
"""

import struct

import numpy as np

MAGIC = b"DEMF"
VERSION = 1


class CheckpointMismatch(ValueError):
    pass


def save_checkpoint(path, named_params):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, p in named_params:
            raw = name.encode("utf-8")
            data = np.asarray(p.data if hasattr(p, "data") else p, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(np.ascontiguousarray(data).tobytes())


def read_checkpoint(path):
    """Return ``{name: float64 array}`` in file order."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointMismatch(f"{path}: unsupported format version {version}")
    pos = 8
    out = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(blob):
                raise CheckpointMismatch(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointMismatch(f"{path}: truncated record ({exc})") from None
    return out


def load_checkpoint(path, module):
    """Copy checkpoint values into ``module``; names and shapes must match exactly."""
    stored = read_checkpoint(path)
    params = dict(module.named_parameters())
    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise CheckpointMismatch(f"parameter names differ: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in params.items():
        if stored[name].shape != p.shape:
            raise CheckpointMismatch(f"{name}: checkpoint shape {stored[name].shape} != model shape {p.shape}")
    for name, p in params.items():
        p.data[...] = stored[name]
    return module
