# src/retrieval_index.py
#
# Bit-packed binary code store with exact Hamming search.
#
# Key operations:
#   - pack / unpack between +-1 vectors and little-endian 64-bit words
#     (bit i -> bit (i mod 64) of word (i div 64), +1 -> 1, padding bits always 0)
#   - hamming via XOR + popcount
#   - CodeIndex: exact linear-scan top-T (ties by insertion order) and radius queries
#   - TXIX file format with FNV-1a 64 checksum
#
# File layout (little-endian):
#   "TXIX" | u32 version | u32 k | u64 N | N x {u64 id, u32 label, ceil(k/64) x u64 words}
#   | u64 FNV-1a of every preceding byte


import os
import struct
from dataclasses import dataclass
import numpy as np
from errors import DataError, IndexFormatError

INDEX_MAGIC = b"TXIX"
INDEX_VERSION = 1
HEADER = struct.Struct("<4sIIQ")
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_SHIFTS = np.arange(64, dtype=np.uint64)


def n_words(k):
    return (k + 63) // 64


def _padding_mask(k):
    """Per-word mask of bits that must stay zero."""
    mask = np.zeros(n_words(k), dtype=np.uint64)
    used = k % 64
    if used:
        mask[-1] = np.uint64(_MASK64 ^ ((1 << used) - 1))
    return mask


def pack_codes(codes):
    """[N, k] +-1 codes -> [N, ceil(k/64)] uint64 words."""
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise DataError(f"pack_codes expects an [N, k] matrix, got shape {codes.shape}")
    if codes.size and not np.isin(codes, (-1, 1)).all():
        raise DataError("codes must contain only -1 and +1")
    n, k = codes.shape
    bits = np.zeros((n, n_words(k) * 64), dtype=np.uint64)
    bits[:, :k] = codes > 0
    bits = bits.reshape(n, n_words(k), 64)
    return np.bitwise_or.reduce(bits << _SHIFTS, axis=2)


def unpack_codes(words, k):
    bits = ((np.asarray(words, dtype=np.uint64)[:, :, None] >> _SHIFTS) & np.uint64(1)).reshape(len(words), -1)
    return (2 * bits[:, :k].astype(np.int8) - 1).astype(np.int8)


@dataclass(frozen=True)
class BinaryCode:
    k: int
    words: np.ndarray

    def __post_init__(self):
        words = np.asarray(self.words, dtype=np.uint64)
        if words.shape != (n_words(self.k),):
            raise DataError(f"{self.k}-bit code needs {n_words(self.k)} words, got shape {words.shape}")
        if np.any(words & _padding_mask(self.k)):
            raise DataError(f"padding bits above bit {self.k} must be zero")
        words.setflags(write=False)
        object.__setattr__(self, "words", words)


def pack(bits):
    bits = np.asarray(bits)
    return BinaryCode(bits.size, pack_codes(bits.reshape(1, -1))[0])


def unpack(code):
    return unpack_codes(code.words[None, :], code.k)[0]


def hamming(a, b):
    if a.k != b.k:
        raise DataError(f"cannot compare a {a.k}-bit code with a {b.k}-bit code")
    return int(np.bitwise_count(a.words ^ b.words).sum())


# === Index ===
class CodeIndex:
    """Immutable packed code array with parallel id and label arrays."""

    def __init__(self, k, words, ids, labels):
        words = np.ascontiguousarray(words, dtype=np.uint64).reshape(-1, n_words(k))
        ids = np.asarray(ids, dtype=np.uint64)
        labels = np.asarray(labels, dtype=np.uint32)
        if not (len(words) == ids.size == labels.size):
            raise DataError(f"index arrays differ in length: {len(words)} codes, {ids.size} ids, {labels.size} labels")
        if np.unique(ids).size != ids.size:
            raise DataError("index ids must be unique")
        if len(words) and np.any(words & _padding_mask(k)):
            raise DataError(f"padding bits above bit {k} must be zero")
        for array in (words, ids, labels):
            array.setflags(write=False)
        self.k, self.words, self.ids, self.labels = int(k), words, ids, labels

    def __len__(self):
        return len(self.ids)

    def distances(self, q):
        if q.k != self.k:
            raise DataError(f"query has {q.k} bits, index has {self.k}")
        return np.bitwise_count(self.words ^ q.words).sum(axis=1, dtype=np.int64)

    def ranking(self, q, top):
        """Positions of the `top` nearest codes, ascending distance then insertion order."""
        d = self.distances(q)
        n = d.size
        top = min(top, n)
        key = d * n + np.arange(n, dtype=np.int64)
        if top < n:
            chosen = np.argpartition(key, top - 1)[:top]
            return chosen[np.argsort(key[chosen])], d
        return np.argsort(key), d


def build_index(codes_pm1, ids, labels):
    codes = np.asarray(codes_pm1)
    if codes.ndim != 2:
        raise DataError(f"build_index expects an [N, k] code matrix, got shape {codes.shape}")
    return CodeIndex(codes.shape[1], pack_codes(codes), ids, labels)


def query_topk(index, q, top):
    """Exact top-T as (id, distance, label) tuples."""
    if top < 1:
        raise DataError(f"T must be >= 1, got {top}")
    if len(index) == 0:
        return []
    order, d = index.ranking(q, top)
    return [(int(index.ids[p]), int(d[p]), int(index.labels[p])) for p in order]


def query_radius(index, q, radius):
    """Every (id, distance) with distance <= radius, in insertion order."""
    if not 0 <= radius <= index.k:
        raise DataError(f"radius must lie in [0, {index.k}], got {radius}")
    if len(index) == 0:
        return []
    d = index.distances(q)
    hits = np.flatnonzero(d <= radius)
    return [(int(index.ids[p]), int(d[p])) for p in hits]


# === Persistence ===
def _record_dtype(k):
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("words", "<u8", (n_words(k),))])


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def index_to_bytes(index):
    records = np.zeros(len(index), dtype=_record_dtype(index.k))
    records["id"] = index.ids
    records["label"] = index.labels
    records["words"] = index.words
    body = HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.k, len(index)) + records.tobytes()
    return body + struct.pack("<Q", fnv1a64(body))


def save_index(index, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def index_from_bytes(raw, source="<bytes>"):
    if len(raw) < HEADER.size:
        raise IndexFormatError(
            f"{source}: truncated header: expected {HEADER.size} bytes, got {len(raw)}", offset=len(raw)
        )
    magic, version, k, n = HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"{source}: bad magic {magic!r}, expected {INDEX_MAGIC!r}", offset=0)
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{source}: unsupported index version {version}", offset=4)
    dtype = _record_dtype(k)
    checksum_at = HEADER.size + n * dtype.itemsize
    expected = checksum_at + 8
    if len(raw) < expected:
        raise IndexFormatError(
            f"{source}: truncated: expected {expected} bytes for {n} {k}-bit records, got {len(raw)}",
            offset=len(raw),
        )
    if len(raw) > expected:
        raise IndexFormatError(f"{source}: {len(raw) - expected} trailing bytes after checksum", offset=expected)
    (stored,) = struct.unpack_from("<Q", raw, checksum_at)
    computed = fnv1a64(memoryview(raw)[:checksum_at])
    if stored != computed:
        raise IndexFormatError(
            f"{source}: checksum mismatch at byte offset {checksum_at}: stored {stored:#018x}, "
            f"computed {computed:#018x} over bytes 0..{checksum_at - 1}",
            offset=checksum_at,
        )
    records = np.frombuffer(raw, dtype=dtype, count=n, offset=HEADER.size)
    try:
        return CodeIndex(k, records["words"].copy(), records["id"].copy(), records["label"].copy())
    except DataError as exc:
        raise IndexFormatError(f"{source}: {exc}") from None


def load_index(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"Missing index file: {path}")
    with open(path, "rb") as fh:
        return index_from_bytes(fh.read(), source=path)
