"""Pure-Python versions of the hot kernels.

These are the reference implementations; ``_speedups`` must agree with them
bit for bit.
"""

from __future__ import annotations

import math
from array import array
from typing import Sequence


def ones_complement_sum(data: bytes, initial: int = 0) -> int:
    """Fold ``data`` (big-endian 16-bit words, odd length zero-padded) into a
    16-bit one's-complement sum starting from ``initial``."""
    if len(data) % 2:
        data = bytes(data) + b"\x00"
    words = array("H", data)
    if words.itemsize != 2:  # pragma: no cover - exotic platforms
        raise RuntimeError("array('H') is not 16-bit here")
    if array("H", b"\x01\x00")[0] == 1:  # little-endian host
        words.byteswap()
    total = initial + sum(words)
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def internet_checksum(data: bytes, initial: int = 0) -> int:
    return ~ones_complement_sum(data, initial) & 0xFFFF


def abs_diffs(values: Sequence[float]) -> list[float]:
    """``[0, |v1-v0|, |v2-v1|, ...]``; empty input gives an empty list."""
    if not values:
        return []
    out = [0.0]
    prev = values[0]
    for v in values[1:]:
        out.append(abs(v - prev))
        prev = v
    return out


def mean_var(values: Sequence[float]) -> tuple[float, float]:
    """Two-pass population mean and variance (divide by N)."""
    n = len(values)
    if n == 0:
        raise ValueError("empty sample")
    m = math.fsum(values) / n
    return m, math.fsum((x - m) * (x - m) for x in values) / n
