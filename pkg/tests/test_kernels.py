import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imci import _kernels_py as py
from imci import kernels

try:
    from imci import _kernels as cy
except ImportError:  # extension not built
    cy = None

needs_cy = pytest.mark.skipif(cy is None, reason="compiled kernels not built")

MASK = (1 << 64) - 1


def fnv_oracle(value: int) -> int:
    # byte-at-a-time FNV-1a over the little-endian two's-complement 8 bytes
    h = 0xCBF29CE484222325
    for b in (value & MASK).to_bytes(8, "little"):
        h ^= b
        h = (h * 0x100000001B3) & MASK
    return h


def test_fnv_known_vectors():
    # frozen from the byte-wise oracle above
    assert fnv_oracle(0) == 0xA8C7F832281A39C5
    assert py.fnv1a64(0) == 0xA8C7F832281A39C5
    assert py.fnv1a64(1) == fnv_oracle(1)


@given(st.integers(-2**63, 2**63 - 1))
def test_fnv_matches_oracle(v):
    assert py.fnv1a64(v) == fnv_oracle(v)
    assert kernels.hash64(v) == fnv_oracle(v)


@given(st.lists(st.integers(-2**63, 2**63 - 1), max_size=50))
def test_fnv_array_matches_scalar(vs):
    arr = np.array(vs, dtype=np.int64)
    out = py.fnv1a64_array(arr)
    assert [int(x) for x in out] == [fnv_oracle(v) for v in vs]


@given(st.integers(0, 64).flatmap(
    lambda w: st.tuples(st.just(w), st.lists(st.integers(0, (1 << w) - 1 if w else 0), max_size=200))))
def test_bitpack_roundtrip(case):
    w, vals = case
    arr = np.array(vals, dtype=np.uint64)
    packed = py.bitpack(arr, w)
    assert len(packed) == (len(vals) * w + 7) // 8
    assert py.bitunpack(packed, w, len(vals)).tolist() == vals


def test_visible_mask_rule():
    INV = np.uint64(2**64 - 1)
    ins = np.array([5, 5, 9, INV], dtype=np.uint64)
    dele = np.array([INV, 9, INV, INV], dtype=np.uint64)
    assert py.visible_mask(ins, dele, 8, 4).tolist() == [True, True, False, False]
    assert py.visible_mask(ins, dele, 9, 4).tolist() == [True, False, True, False]
    # dropped insert map: everything left is old enough
    assert py.visible_mask(None, dele, 4, 4).tolist() == [True, True, True, True]


@needs_cy
@given(st.lists(st.integers(-2**63, 2**63 - 1), max_size=50))
def test_backends_agree_on_hash(vs):
    arr = np.array(vs, dtype=np.int64)
    assert np.array_equal(cy.fnv1a64_array(arr), py.fnv1a64_array(arr))
    for v in vs:
        assert cy.fnv1a64(v) == py.fnv1a64(v)


@needs_cy
@given(st.integers(0, 64).flatmap(
    lambda w: st.tuples(st.just(w), st.lists(st.integers(0, (1 << w) - 1 if w else 0), max_size=200))))
def test_backends_agree_on_bitpack(case):
    w, vals = case
    arr = np.array(vals, dtype=np.uint64)
    assert bytes(cy.bitpack(arr, w)) == bytes(py.bitpack(arr, w))
    assert np.array_equal(cy.bitunpack(py.bitpack(arr, w), w, len(vals)), arr)


@needs_cy
@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 20)), max_size=100), st.integers(0, 20))
def test_backends_agree_on_visibility(pairs, snap):
    ins = np.array([a for a, _ in pairs], dtype=np.uint64)
    dele = np.array([b for _, b in pairs], dtype=np.uint64)
    n = len(pairs)
    assert np.array_equal(cy.visible_mask(ins, dele, snap, n), py.visible_mask(ins, dele, snap, n))
