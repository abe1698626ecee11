"""Pure numpy fallback for the compiled kernels in ``_kernels.pyx``.

Both modules expose the same five functions with identical semantics; the
benchmark in ``benchmarks/bench_kernels.py`` compares them.
"""

import numpy as np

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)
_FNV_OFFSET_INT = 0xCBF29CE484222325
_FNV_PRIME_INT = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(value):
    """FNV-1a over the 8 little-endian bytes of a signed 64-bit integer."""
    h = _FNV_OFFSET_INT
    v = value & _MASK64
    for _ in range(8):
        h ^= v & 0xFF
        h = (h * _FNV_PRIME_INT) & _MASK64
        v >>= 8
    return h


def fnv1a64_array(values):
    v = np.ascontiguousarray(values, dtype=np.int64).view(np.uint64)
    h = np.full(v.shape, FNV_OFFSET, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (v >> np.uint64(shift)) & np.uint64(0xFF)
            h *= FNV_PRIME
    return h


def bitpack(values, width):
    """Pack uint64 values into ``width`` bits each, LSB first, byte aligned."""
    v = np.ascontiguousarray(values, dtype=np.uint64)
    n = v.shape[0]
    if width == 0 or n == 0:
        return b""
    nbytes = (n * width + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    # chunked so the bit matrix stays small
    chunk = 65536
    bitpos = 0
    for start in range(0, n, chunk):
        part = v[start:start + chunk]
        bits = np.unpackbits(part.view(np.uint8).reshape(-1, 8), axis=1, bitorder="little")
        bits = bits[:, :width].reshape(-1)
        packed = np.packbits(bits, bitorder="little")
        nbits = bits.shape[0]
        # chunk * width is a multiple of 8, so every chunk starts on a byte
        b0 = bitpos // 8
        out[b0:b0 + packed.shape[0]] = packed
        bitpos += nbits
    return out.tobytes()


def bitunpack(data, width, n):
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    if width == 0:
        return np.zeros(n, dtype=np.uint64)
    raw = np.frombuffer(data, dtype=np.uint8)
    bits = np.unpackbits(raw, bitorder="little")[: n * width].reshape(n, width)
    full = np.zeros((n, 64), dtype=np.uint8)
    full[:, :width] = bits
    return np.packbits(full, axis=1, bitorder="little").view(np.uint64).reshape(n)


def visible_mask(insert_vid, delete_vid, snapshot, n):
    """Rows r < n with insert_vid[r] <= snapshot < delete_vid[r].

    ``insert_vid`` may be None (map dropped): only the delete bound applies.
    """
    s = np.uint64(snapshot)
    mask = delete_vid[:n] > s
    if insert_vid is not None:
        mask &= insert_vid[:n] <= s
    return mask
