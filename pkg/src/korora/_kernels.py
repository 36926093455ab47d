"""Batch kernels with a numba path and a pure-numpy fallback.

Set ``KORORA_NO_NUMBA=1`` before import to force the numpy path. Both paths
return identical results; ``tests/test_kernels.py`` checks them against each
other and ``bench/bench_kernels.py`` times them.
"""

import os

import numpy as np

# access decision codes shared with policy.py
OK = 0
READ_DOWN = 1
WRITE_UP = 2
CATEGORY = 3
MATRIX = 4

# routing codes shared with storage.py
SERVED_ORIGINAL = 0
SERVED_REPLACEMENT = 1
SERVED_MERGED = 2

# attribute codes: r, w, a, e
_READ, _WRITE, _APPEND, _EXECUTE = 0, 1, 2, 3


def _access_codes_np(s_rank, s_cat, o_rank, o_cat, attr, granted):
    s_rank = np.asarray(s_rank, dtype=np.int64)
    o_rank = np.asarray(o_rank, dtype=np.int64)
    s_cat = np.asarray(s_cat, dtype=np.int64)
    o_cat = np.asarray(o_cat, dtype=np.int64)
    attr = np.asarray(attr, dtype=np.int64)
    granted = np.asarray(granted, dtype=np.int64)

    readlike = (attr == _READ) | (attr == _EXECUTE)
    out = np.zeros(attr.shape, dtype=np.int8)
    out[(granted >> attr) & 1 == 0] = MATRIX
    out[(o_cat & ~s_cat) != 0] = CATEGORY
    out[~readlike & (s_rank > o_rank)] = WRITE_UP
    out[readlike & (o_rank > s_rank)] = READ_DOWN
    return out


def _changed_chunks_np(a, b):
    return np.any(a != b, axis=1)


def _route_reads_np(indices, counts, present, threshold):
    # sequential by nature: an outsourced chunk changes routing for later reads
    out = np.empty(len(indices), dtype=np.int8)
    for k in range(len(indices)):
        i = indices[k]
        if present[i]:
            out[k] = SERVED_REPLACEMENT
            counts[i] += 1
            continue
        counts[i] += 1
        if counts[i] >= threshold:
            present[i] = True
            out[k] = SERVED_MERGED
        else:
            out[k] = SERVED_ORIGINAL
    return out


access_codes = _access_codes_np
changed_chunks = _changed_chunks_np
route_reads = _route_reads_np
BACKEND = "numpy"

if os.environ.get("KORORA_NO_NUMBA", "") not in ("1", "true", "yes"):
    try:
        from numba import njit
    except ImportError:  # pragma: no cover
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _access_codes_nb(s_rank, s_cat, o_rank, o_cat, attr, granted):
            n = attr.shape[0]
            out = np.zeros(n, dtype=np.int8)
            for k in range(n):
                x = attr[k]
                if x == _READ or x == _EXECUTE:
                    if o_rank[k] > s_rank[k]:
                        out[k] = READ_DOWN
                        continue
                elif s_rank[k] > o_rank[k]:
                    out[k] = WRITE_UP
                    continue
                if (o_cat[k] & ~s_cat[k]) != 0:
                    out[k] = CATEGORY
                elif (granted[k] >> x) & 1 == 0:
                    out[k] = MATRIX
            return out

        @njit(cache=True)
        def _changed_chunks_nb(a, b):
            rows, cols = a.shape
            out = np.zeros(rows, dtype=np.bool_)
            for i in range(rows):
                for j in range(cols):
                    if a[i, j] != b[i, j]:
                        out[i] = True
                        break
            return out

        _route_reads_nb = njit(cache=True)(_route_reads_np)

        def access_codes(s_rank, s_cat, o_rank, o_cat, attr, granted):
            return _access_codes_nb(
                np.ascontiguousarray(s_rank, dtype=np.int64),
                np.ascontiguousarray(s_cat, dtype=np.int64),
                np.ascontiguousarray(o_rank, dtype=np.int64),
                np.ascontiguousarray(o_cat, dtype=np.int64),
                np.ascontiguousarray(attr, dtype=np.int64),
                np.ascontiguousarray(granted, dtype=np.int64),
            )

        def changed_chunks(a, b):
            a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
            if a.dtype == np.uint8 and a.shape == b.shape and a.shape[1] % 8 == 0:
                # compare whole words; chunk sizes are powers of two
                a, b = a.view(np.uint64), b.view(np.uint64)
            return _changed_chunks_nb(a, b)

        def route_reads(indices, counts, present, threshold):
            return _route_reads_nb(
                np.ascontiguousarray(indices, dtype=np.int64), counts, present, np.int64(threshold)
            )

        BACKEND = "numba"


def numpy_kernels():
    """The fallback implementations, regardless of the active backend."""
    return {
        "access_codes": _access_codes_np,
        "changed_chunks": _changed_chunks_np,
        "route_reads": _route_reads_np,
    }
