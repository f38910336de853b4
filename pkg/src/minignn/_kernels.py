"""Compiled CSR loops backing the fused message-passing path.

All kernels take node-major buffers (``[num_nodes, d]``) so the inner loop
over features is contiguous.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def csr_spmm(row_ptr, col_idx, scale, xt):
    """out[t] = sum over CSR row t of scale[k] * xt[col_idx[k]]."""
    n = row_ptr.shape[0] - 1
    d = xt.shape[1]
    out = np.zeros((n, d), dtype=xt.dtype)
    for t in range(n):
        for k in range(row_ptr[t], row_ptr[t + 1]):
            s = scale[k]
            c = col_idx[k]
            for r in range(d):
                out[t, r] += s * xt[c, r]
    return out


@numba.njit(cache=True)
def csr_spmm_transpose(row_ptr, col_idx, scale, gt, num_src):
    """Adjoint of :func:`csr_spmm` with respect to ``xt``."""
    n = row_ptr.shape[0] - 1
    d = gt.shape[1]
    out = np.zeros((num_src, d), dtype=gt.dtype)
    for t in range(n):
        for k in range(row_ptr[t], row_ptr[t + 1]):
            s = scale[k]
            c = col_idx[k]
            for r in range(d):
                out[c, r] += s * gt[t, r]
    return out


@numba.njit(cache=True)
def csr_edge_dot(row_ptr, col_idx, gt, xt):
    """Per-edge (CSR order) dot product of gt[target] and xt[source]."""
    n = row_ptr.shape[0] - 1
    d = gt.shape[1]
    out = np.zeros(col_idx.shape[0], dtype=gt.dtype)
    for t in range(n):
        for k in range(row_ptr[t], row_ptr[t + 1]):
            c = col_idx[k]
            acc = 0.0
            for r in range(d):
                acc += gt[t, r] * xt[c, r]
            out[k] = acc
    return out


@numba.njit(cache=True)
def segment_max(offsets, order, vt):
    """Per-segment max of the rows ``vt[order[k]]`` for k in each segment.

    Empty segments yield 0 with argmax -1. Ties keep the first row in
    segment order.
    """
    nseg = offsets.shape[0] - 1
    d = vt.shape[1]
    out = np.zeros((nseg, d), dtype=vt.dtype)
    arg = np.full((nseg, d), -1, dtype=np.int64)
    for t in range(nseg):
        lo = offsets[t]
        hi = offsets[t + 1]
        if lo == hi:
            continue
        for r in range(d):
            best = vt[order[lo], r]
            bi = order[lo]
            for k in range(lo + 1, hi):
                v = vt[order[k], r]
                if v > best:
                    best = v
                    bi = order[k]
            out[t, r] = best
            arg[t, r] = bi
    return out, arg
