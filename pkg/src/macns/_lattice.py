"""Sparse building blocks acting along one axis of a C-ordered lattice array."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _along(shape, axis, m1d):
    before = int(np.prod(shape[:axis], dtype=np.int64))
    after = int(np.prod(shape[axis + 1 :], dtype=np.int64))
    return sp.kron(sp.kron(sp.identity(before, format="csr"), m1d), sp.identity(after, format="csr"), format="csr")


def diff(shape, axis):
    """y[a] = x[a+1] - x[a]; output has one entry less along ``axis``."""
    n = shape[axis]
    m = sp.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    return _along(shape, axis, m)


def pad_diff(shape, axis):
    """y[a] = x[a] - x[a-1] with zeros outside; one entry more along ``axis``."""
    n = shape[axis]
    m = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n))
    return _along(shape, axis, m)


def avg(shape, axis):
    n = shape[axis]
    m = sp.diags([0.5 * np.ones(n - 1), 0.5 * np.ones(n - 1)], [0, 1], shape=(n - 1, n))
    return _along(shape, axis, m)


def pad_avg(shape, axis):
    n = shape[axis]
    m = sp.diags([0.5 * np.ones(n), 0.5 * np.ones(n)], [0, -1], shape=(n + 1, n))
    return _along(shape, axis, m)


def pick_lo(shape, axis):
    """y[a] = x[a-1] (0 for a = 0); one entry more along ``axis``."""
    n = shape[axis]
    return _along(shape, axis, sp.eye(n + 1, n, k=-1))


def pick_hi(shape, axis):
    """y[a] = x[a] (0 for a = n); one entry more along ``axis``."""
    n = shape[axis]
    return _along(shape, axis, sp.eye(n + 1, n, k=0))


def select(mask):
    """Rows picking the True entries of a dense boolean array."""
    pos = np.flatnonzero(np.ravel(mask))
    return sp.csr_matrix((np.ones(pos.size), (np.arange(pos.size), pos)), shape=(pos.size, mask.size))


def diag(arr):
    return sp.diags(np.ravel(arr).astype(float), format="csr")


def grow(shape, axis):
    s = list(shape)
    s[axis] += 1
    return tuple(s)
