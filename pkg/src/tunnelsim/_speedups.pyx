# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_purepy``. Same signatures, same results."""

from libc.math cimport fabs
from libc.stdint cimport uint64_t

import math


def ones_complement_sum(const unsigned char[:] data, unsigned long initial=0):
    cdef Py_ssize_t n = data.shape[0]
    cdef Py_ssize_t i
    cdef uint64_t total = initial
    for i in range(0, n - 1, 2):
        total += (<uint64_t>data[i] << 8) | data[i + 1]
    if n % 2:
        total += <uint64_t>data[n - 1] << 8
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return <unsigned long>total


def internet_checksum(const unsigned char[:] data, unsigned long initial=0):
    return ~ones_complement_sum(data, initial) & 0xFFFF


def abs_diffs(values):
    cdef Py_ssize_t n = len(values)
    cdef Py_ssize_t i
    cdef double prev, cur
    if n == 0:
        return []
    out = [0.0] * n
    prev = values[0]
    for i in range(1, n):
        cur = values[i]
        out[i] = fabs(cur - prev)
        prev = cur
    return out


def mean_var(values):
    # fsum keeps results identical to the pure-Python path
    cdef Py_ssize_t n = len(values)
    cdef double m, d
    if n == 0:
        raise ValueError("empty sample")
    m = math.fsum(values) / n
    sq = [0.0] * n
    for i in range(n):
        d = values[i] - m
        sq[i] = d * d
    return m, math.fsum(sq) / n
