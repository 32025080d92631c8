import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tunnelsim import _purepy, kernels

from conftest import oracle_checksum_sum

try:
    from tunnelsim import _speedups
except ImportError:  # pragma: no cover - extension not built
    _speedups = None

needs_ext = pytest.mark.skipif(_speedups is None, reason="compiled extension not built")
floats = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_backend_is_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("impl", [_purepy, pytest.param(_speedups, marks=needs_ext)], ids=["python", "cython"])
class TestAgainstOracle:
    def test_zero_header_checksum(self, impl):
        assert impl.internet_checksum(bytes(20)) == 0xFFFF

    def test_rfc1071_words(self, impl):
        data = bytes([0x00, 0x01, 0xF2, 0x03])
        assert impl.ones_complement_sum(data) == oracle_checksum_sum(data) == 0xF204

    def test_odd_length_pads_with_zero(self, impl):
        assert impl.ones_complement_sum(b"\x12\x34\x56") == oracle_checksum_sum(b"\x12\x34\x56\x00")

    def test_random_buffers(self, impl):
        rng = random.Random(7)
        for n in list(range(0, 70)) + [1499, 1500, 1568]:
            data = bytes(rng.getrandbits(8) for _ in range(n))
            init = rng.getrandbits(16)
            assert impl.ones_complement_sum(data, init) == oracle_checksum_sum(data, init)

    def test_abs_diffs(self, impl):
        assert impl.abs_diffs([1.0, 1.25, 1.125]) == [0.0, 0.25, 0.125]
        assert impl.abs_diffs([]) == []

    def test_mean_var_population(self, impl):
        mean, var = impl.mean_var([1.0, 2.0, 3.0, 4.0])
        assert mean == 2.5 and var == 1.25

    def test_mean_var_empty(self, impl):
        with pytest.raises(ValueError):
            impl.mean_var([])


@needs_ext
@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=2000), st.integers(0, 0xFFFF))
def test_checksum_parity(data, init):
    assert _speedups.ones_complement_sum(data, init) == _purepy.ones_complement_sum(data, init)
    assert _speedups.internet_checksum(data, init) == _purepy.internet_checksum(data, init)


@needs_ext
@settings(max_examples=300, deadline=None)
@given(st.lists(floats, min_size=1, max_size=200))
def test_stats_parity(xs):
    assert _speedups.abs_diffs(xs) == _purepy.abs_diffs(xs)
    assert _speedups.mean_var(xs) == _purepy.mean_var(xs)


@settings(max_examples=200, deadline=None)
@given(st.lists(floats, min_size=1, max_size=6))
def test_variance_matches_brute_force(xs):
    m = math.fsum(xs) / len(xs)
    brute = math.fsum([(x - m) * (x - m) for x in xs]) / len(xs)
    assert kernels.mean_var(xs) == (m, brute)
