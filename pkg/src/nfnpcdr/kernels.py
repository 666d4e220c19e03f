"""Hot inner loops, each with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``NFNPCDR_NUMBA=0`` to force
the numpy path; it is also used automatically when numba is not importable.
Both paths are kept bit-compatible: reductions add values left to right in
a fixed order, starting from ``0.0``, so switching backends does not change
results.

Usage::

    from nfnpcdr import kernels
    sums = kernels.segment_sorted_sum(values, seg, n_seg)
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator


def _numba_requested():
    flag = os.environ.get("NFNPCDR_NUMBA", "1").strip().lower()
    return flag not in {"0", "false", "no", "off"}


USE_NUMBA = HAVE_NUMBA and _numba_requested()
BACKEND = "numba" if USE_NUMBA else "numpy"


# =============================================================================
# Canonical segment sums
# =============================================================================
#
# Set aggregation must not depend on the order rows are stored in. Each
# column of each segment is sorted ascending and then summed sequentially,
# so any permutation of a segment's rows yields bit-identical sums.


@njit(cache=True)
def _segment_sorted_sum_nb(values, seg, n_seg):
    n_rows, width = values.shape
    starts = np.zeros(n_seg + 1, np.int64)
    for r in range(n_rows):
        starts[seg[r] + 1] += 1
    longest = 0
    for s in range(n_seg):
        if starts[s + 1] > longest:
            longest = starts[s + 1]
        starts[s + 1] += starts[s]
    order = np.empty(n_rows, np.int64)
    fill = starts[:n_seg].copy()
    for r in range(n_rows):
        order[fill[seg[r]]] = r
        fill[seg[r]] += 1
    out = np.zeros((n_seg, width))
    buf = np.empty(longest)
    for s in range(n_seg):
        lo = starts[s]
        n = starts[s + 1] - lo
        for c in range(width):
            if n > 64:
                for k in range(n):
                    buf[k] = values[order[lo + k], c]
                buf[:n].sort()
            else:
                # insertion sort in place; support sets are short
                for k in range(n):
                    x = values[order[lo + k], c]
                    j = k
                    while j > 0 and buf[j - 1] > x:
                        buf[j] = buf[j - 1]
                        j -= 1
                    buf[j] = x
            acc = 0.0
            for k in range(n):
                acc += buf[k]
            out[s, c] = acc
    return out


def _segment_sorted_sum_np(values, seg, n_seg):
    n_rows, width = values.shape
    counts = np.bincount(seg, minlength=n_seg)
    longest = int(counts.max()) if n_rows else 0
    order = np.argsort(seg, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    pos = np.arange(n_rows) - np.repeat(starts, counts)
    padded = np.full((n_seg, longest, width), np.inf)
    padded[seg[order], pos] = values[order]
    padded.sort(axis=1)
    padded[np.arange(longest)[None, :] >= counts[:, None]] = 0.0
    # leading zero matches the numba accumulator start
    lead = np.zeros((n_seg, 1, width))
    return np.cumsum(np.concatenate((lead, padded), axis=1), axis=1)[:, -1, :]


def segment_sorted_sum(values, seg, n_seg):
    """Per-segment column sums that are invariant to row order.

    Parameters
    ----------
    values : ndarray (R, d)
    seg : int ndarray (R,)
        Segment id of each row, in ``[0, n_seg)``.
    n_seg : int

    Returns
    -------
    ndarray (n_seg, d)
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    seg = np.ascontiguousarray(seg, dtype=np.int64)
    if USE_NUMBA:
        return _segment_sorted_sum_nb(values, seg, int(n_seg))
    return _segment_sorted_sum_np(values, seg, int(n_seg))


# =============================================================================
# Sequential reduction along the leading axis
# =============================================================================


@njit(cache=True)
def _leading_sum_nb(values):
    n, width = values.shape
    out = np.zeros(width)
    for i in range(n):
        for c in range(width):
            out[c] += values[i, c]
    return out


def _leading_sum_np(values):
    lead = np.zeros((1, values.shape[1]))
    return np.cumsum(np.concatenate((lead, values), axis=0), axis=0)[-1]


def leading_sum(values):
    """Sum a 2-D array over axis 0, strictly left to right."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    if USE_NUMBA:
        return _leading_sum_nb(values)
    return _leading_sum_np(values)


def sequential_sum(x, axis=None, keepdims=False):
    """Fixed-order sum of ``x`` over ``axis`` (one int or None)."""
    x = np.asarray(x, dtype=np.float64)
    if axis is None:
        total = leading_sum(x.reshape(-1, 1))[0]
        out = np.asarray(total)
        return out.reshape((1,) * x.ndim) if keepdims else out
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, 0)
    rest = moved.shape[1:]
    out = leading_sum(moved.reshape(moved.shape[0], -1)).reshape(rest)
    if keepdims:
        out = np.expand_dims(out, axis)
    return out


# =============================================================================
# xorshift64* generator
# =============================================================================
#
# The synthetic data generator needs a stream that is identical on every
# platform, so it uses an explicit 64-bit integer-state algorithm instead of
# numpy's generators. Constants follow Vigna's xorshift64* and splitmix64.
# The same source runs compiled (numba) or interpreted (fallback).

_MUL = np.uint64(2685821657736338717)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S11 = np.uint64(11)
_S12 = np.uint64(12)
_S25 = np.uint64(25)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_INV53 = 1.0 / 9007199254740992.0


def _splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def _xs_next(state):
    x = state[0]
    x ^= x >> _S12
    x ^= x << _S25
    x ^= x >> _S27
    state[0] = x
    return x * _MUL


def _xs_uniform(state):
    # top 53 bits -> [0, 1)
    return np.float64(_xs_next(state) >> _S11) * _INV53


def _xs_normal(state):
    u1 = 1.0 - _xs_uniform(state)
    u2 = _xs_uniform(state)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def _xs_gamma(state, shape):
    # Marsaglia-Tsang; shape < 1 boosted via U**(1/shape)
    boost = 1.0
    if shape < 1.0:
        boost = (1.0 - _xs_uniform(state)) ** (1.0 / shape)
        shape = shape + 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    while True:
        x = _xs_normal(state)
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = 1.0 - _xs_uniform(state)
        if np.log(u) < 0.5 * x * x + d - d * v + d * np.log(v):
            return d * v * boost


def _seed_state(seed, stream):
    state = np.zeros(1, np.uint64)
    s = _splitmix64(np.uint64(seed) ^ _splitmix64(np.uint64(stream)))
    if s == np.uint64(0):
        s = _GOLDEN
    state[0] = s
    return state


def _synth_body(seed, n_users, n_overlap, n_items, n_inter, n_interest,
                concentration, noise):
    # stream 0: item interests; stream 1 + u: everything about user u
    state = _seed_state(seed, 0)
    item_interest = np.empty((2, n_items), np.int64)
    for dom in range(2):
        for j in range(n_items):
            item_interest[dom, j] = int(_xs_uniform(state) * n_interest)
    mixture = np.empty((n_users, n_interest))
    items = np.zeros((2, n_users, n_inter), np.int64)
    ratings = np.zeros((2, n_users, n_inter), np.int64)
    pool = np.empty(n_items, np.int64)
    for u in range(n_users):
        state = _seed_state(seed, 1 + u)
        total = 0.0
        for g in range(n_interest):
            mixture[u, g] = _xs_gamma(state, concentration)
            total += mixture[u, g]
        for g in range(n_interest):
            mixture[u, g] = mixture[u, g] / total
        n_dom = 2 if u < n_overlap else 1
        for dom in range(n_dom):
            for j in range(n_items):
                pool[j] = j
            # partial Fisher-Yates: first n_inter slots are the sample
            for k in range(n_inter):
                pick = k + int(_xs_uniform(state) * (n_items - k))
                tmp = pool[k]
                pool[k] = pool[pick]
                pool[pick] = tmp
                item = pool[k]
                items[dom, u, k] = item
                affinity = mixture[u, item_interest[dom, item]]
                raw = 1.0 + 4.0 * affinity + noise * _xs_normal(state)
                r = int(np.floor(raw + 0.5))
                ratings[dom, u, k] = min(5, max(1, r))
    return item_interest, mixture, items, ratings


_synth_nb = None
if USE_NUMBA:
    _splitmix64 = njit(cache=True)(_splitmix64)
    _xs_next = njit(cache=True)(_xs_next)
    _xs_uniform = njit(cache=True)(_xs_uniform)
    _xs_normal = njit(cache=True)(_xs_normal)
    _xs_gamma = njit(cache=True)(_xs_gamma)
    _seed_state = njit(cache=True)(_seed_state)
    _synth_nb = njit(cache=True)(_synth_body)


def synth_draws(seed, n_users, n_overlap, n_items, n_inter, n_interest,
                concentration, noise):
    """Draw every random quantity of the synthetic generator.

    Returns ``(item_interest[2, I], mixture[U, G], items[2, U, n],
    ratings[2, U, n])``; domain 0 is the source. Rows of domain 1 past
    ``n_overlap`` are unused and left at zero.
    """
    args = (np.uint64(seed), int(n_users), int(n_overlap), int(n_items),
            int(n_inter), int(n_interest), float(concentration), float(noise))
    if _synth_nb is not None:
        return _synth_nb(*args)
    with np.errstate(over="ignore"):
        return _synth_body(*args)
