# src/checkpoint.py
#
# Named-parameter blob files shared by the Stage-1 checkpoint ("TSNW"), the fusion /
# attention parameters ("FUSD") and the Stage-2 hash model ("HSHM").
#
# Layout (all integers little-endian):
#   magic (4 bytes) | u32 format version | u32 n | n bytes of UTF-8 JSON config echo
#   | u32 blob count | per blob: u16 name length, name, u8 ndim, ndim x u32 dims,
#     product(dims) float64 values (little-endian)
#
# Notes:
#   - Blobs are written in sorted name order and the echo with sorted keys, so the same
#     parameters always produce the same bytes.


import json
import os
import struct
import numpy as np
from errors import CheckpointFormatError

FORMAT_VERSION = 1


def save_blobs(path, magic, meta, params):
    """Write `params` (name -> array) with the JSON-serialisable `meta` echo."""
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {magic!r}")
    echo = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [magic.encode("ascii"), struct.pack("<II", FORMAT_VERSION, len(echo)), echo]
    chunks.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        array = np.asarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array).tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(
                f"{self.path}: truncated while reading {what} at byte {self.pos}: "
                f"need {n} bytes, only {len(self.raw) - self.pos} remain"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_blobs(path, magic):
    """Return (meta, params) from a blob file, validating magic, version and sizes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw, path)
    found = reader.take(4, "magic")
    if found != magic.encode("ascii"):
        raise CheckpointFormatError(f"{path}: bad magic {found!r}, expected {magic!r}")
    version, echo_len = reader.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    try:
        meta = json.loads(reader.take(echo_len, "config echo").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable config echo ({exc})") from None

    (count,) = reader.unpack("<I", "blob count")
    params = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H", "blob name length")
        name = reader.take(name_len, "blob name").decode("utf-8")
        (ndim,) = reader.unpack("<B", f"rank of {name}")
        shape = reader.unpack(f"<{ndim}I", f"shape of {name}")
        n_values = int(np.prod(shape)) if ndim else 1
        payload = reader.take(8 * n_values, f"values of {name}")
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    if reader.pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - reader.pos} trailing bytes after last blob")
    return meta, params
