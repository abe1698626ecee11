import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from imci import compression as cz
from imci.kernels import bitunpack

int64s = st.integers(-2**63, 2**63 - 1)


def test_for_example():
    blk = cz.encode_for([7, 9, 12])
    assert (blk.base, blk.width, blk.n) == (7, 3, 3)
    assert bitunpack(blk.packed, blk.width, blk.n).tolist() == [0, 2, 5]
    assert blk.decode().tolist() == [7, 9, 12]


def test_all_equal_column_has_zero_width():
    blk = cz.encode_for([42] * 100)
    assert blk.width == 0 and blk.packed == b""
    assert cz.decode_ints(cz.encode_ints([42] * 100)).tolist() == [42] * 100


def test_dictionary_example():
    words, codes = cz.dictionary_of(cz.encode_strings(["a", "b", "a"]))
    assert words == ["a", "b"]
    assert codes.tolist() == [0, 1, 0]


def test_extremes_roundtrip():
    v = np.array([-2**63, 2**63 - 1, 0, -1, 1], dtype=np.int64)
    assert np.array_equal(cz.decode_ints(cz.encode_ints(v)), v)


def test_sorted_run_prefers_delta():
    v = np.arange(10_000, dtype=np.int64) * 3 + 10**15
    enc = cz.encode_ints(v)
    assert enc[0] == cz.TAG_DELTA
    assert np.array_equal(cz.decode_ints(enc), v)
    assert len(enc) < v.nbytes // 20


def test_empty():
    assert len(cz.decode_ints(cz.encode_ints([]))) == 0
    assert len(cz.decode_strings(cz.encode_strings([]))) == 0


@given(st.lists(int64s, max_size=300))
def test_int_roundtrip(vals):
    v = np.array(vals, dtype=np.int64)
    assert cz.decode_ints(cz.encode_ints(v)).tolist() == vals


@given(st.lists(st.integers(-1000, 1000), min_size=1, max_size=300))
def test_narrow_values_pack_tightly(vals):
    blk = cz.encode_for(vals)
    assert blk.width == (max(vals) - min(vals)).bit_length()


@given(st.lists(st.text(max_size=20), max_size=200))
def test_string_roundtrip(vals):
    assert cz.decode_strings(cz.encode_strings(vals)).tolist() == vals


def test_million_random_int64():
    rng = np.random.default_rng(1)
    v = rng.integers(-2**63, 2**63 - 1, size=10**6, dtype=np.int64, endpoint=True)
    assert np.array_equal(cz.decode_ints(cz.encode_ints(v)), v)
