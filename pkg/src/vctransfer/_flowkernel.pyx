# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled exhaustive block matching. Semantics mirror ``_flowkernel_py.block_match``."""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport abs as iabs

cnp.import_array()


def candidate_offsets(int radius):
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    offs.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[1], d[0]))
    return np.asarray(offs, dtype=np.int32)


def block_match(const int[:, :, ::1] a, const int[:, :, ::1] b, int block, int radius):
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], c = a.shape[2]
    cdef Py_ssize_t nby = (h + block - 1) // block, nbx = (w + block - 1) // block
    cdef int[:, ::1] offs = candidate_offsets(radius)
    cdef Py_ssize_t n_off = offs.shape[0]
    out_arr = np.zeros((nby, nbx, 2), dtype=np.int32)
    cdef int[:, :, ::1] out = out_arr
    cdef Py_ssize_t by, bx, y0, x0, y1, x1, y, x, k, ch, yy, xx, area
    cdef int dx, dy
    cdef long long cost, count, best_cost, best_count
    for by in range(nby):
        y0 = by * block
        y1 = min(y0 + block, h)
        for bx in range(nbx):
            x0 = bx * block
            x1 = min(x0 + block, w)
            area = (y1 - y0) * (x1 - x0)
            best_cost = -1
            best_count = 1
            for k in range(n_off):
                dx = offs[k, 0]
                dy = offs[k, 1]
                cost = 0
                count = 0
                for y in range(y0, y1):
                    yy = y + dy
                    if yy < 0 or yy >= h:
                        continue
                    for x in range(x0, x1):
                        xx = x + dx
                        if xx < 0 or xx >= w:
                            continue
                        count += 1
                        for ch in range(c):
                            cost += iabs(a[y, x, ch] - b[yy, xx, ch])
                if 2 * count < area:
                    continue
                if best_cost < 0 or cost * best_count < best_cost * count:
                    best_cost = cost
                    best_count = count
                    out[by, bx, 0] = dx
                    out[by, bx, 1] = dy
    return out_arr
