"""Pack encodings.

Integers: frame-of-reference (subtract the pack minimum) followed by bit
packing at ``ceil(log2(max_offset + 1))`` bits, optionally preceded by delta
encoding; ``encode_ints`` keeps whichever of the two is smaller. All offset
arithmetic is done modulo 2**64 so the full int64 range round-trips.

Strings: sorted dictionary plus u32 codes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .kernels import bitpack, bitunpack

TAG_FOR = 0
TAG_DELTA = 1
TAG_DICT = 2

_FOR_HDR = struct.Struct("<BqBI")  # tag, base, width, n
_DICT_HDR = struct.Struct("<BII")  # tag, dict size, n


def bit_width(max_offset: int) -> int:
    return int(max_offset).bit_length()


@dataclass(frozen=True)
class ForBlock:
    base: int
    width: int
    n: int
    packed: bytes

    def decode(self) -> np.ndarray:
        offs = bitunpack(self.packed, self.width, self.n)
        with np.errstate(over="ignore"):
            return (offs + np.uint64(self.base & 0xFFFFFFFFFFFFFFFF)).view(np.int64)


def encode_for(values) -> ForBlock:
    v = np.ascontiguousarray(values, dtype=np.int64)
    if len(v) == 0:
        return ForBlock(0, 0, 0, b"")
    base = int(v.min())
    with np.errstate(over="ignore"):
        offs = v.view(np.uint64) - np.uint64(base & 0xFFFFFFFFFFFFFFFF)
    width = bit_width(int(offs.max()))
    return ForBlock(base, width, len(v), bitpack(offs, width))


def _deltas(v: np.ndarray) -> np.ndarray:
    d = np.empty_like(v)
    if len(v):
        d[0] = 0
        with np.errstate(over="ignore"):
            np.subtract(v[1:], v[:-1], out=d[1:])
    return d


def encode_ints(values) -> bytes:
    v = np.ascontiguousarray(values, dtype=np.int64)
    plain = encode_for(v)
    best_tag, best = TAG_FOR, plain
    if len(v) > 1:
        delta = encode_for(_deltas(v))
        # delta needs the first value, stored after the header
        if len(delta.packed) + 8 < len(plain.packed):
            best_tag, best = TAG_DELTA, delta
    out = _FOR_HDR.pack(best_tag, best.base, best.width, best.n)
    if best_tag == TAG_DELTA:
        out += struct.pack("<q", int(v[0]))
    return out + best.packed


def decode_ints(buf: bytes) -> np.ndarray:
    tag, base, width, n = _FOR_HDR.unpack_from(buf, 0)
    off = _FOR_HDR.size
    if tag == TAG_FOR:
        return ForBlock(base, width, n, buf[off:]).decode()
    if tag != TAG_DELTA:
        raise ValueError(f"not an integer pack: tag {tag}")
    (first,) = struct.unpack_from("<q", buf, off)
    d = ForBlock(base, width, n, buf[off + 8:]).decode()
    d[0] = first
    with np.errstate(over="ignore"):
        return np.cumsum(d, dtype=np.int64)


def encode_strings(values) -> bytes:
    vals = list(values)
    dictionary = sorted(set(vals))
    index = {s: i for i, s in enumerate(dictionary)}
    codes = np.fromiter((index[s] for s in vals), dtype="<u4", count=len(vals))
    parts = [_DICT_HDR.pack(TAG_DICT, len(dictionary), len(vals))]
    for s in dictionary:
        b = s.encode()
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
    parts.append(codes.tobytes())
    return b"".join(parts)


def dictionary_of(buf: bytes) -> tuple[list[str], np.ndarray]:
    tag, nd, n = _DICT_HDR.unpack_from(buf, 0)
    if tag != TAG_DICT:
        raise ValueError(f"not a dictionary pack: tag {tag}")
    off = _DICT_HDR.size
    words = []
    for _ in range(nd):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        words.append(buf[off:off + ln].decode())
        off += ln
    codes = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
    return words, codes


def decode_strings(buf: bytes) -> np.ndarray:
    words, codes = dictionary_of(buf)
    table = np.array(words, dtype=object) if words else np.zeros(0, dtype=object)
    return table[codes] if len(codes) else np.zeros(0, dtype=object)
