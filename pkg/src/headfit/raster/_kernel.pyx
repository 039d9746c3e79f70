# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled z-buffer kernel. Must stay arithmetically identical to _fallback.py."""
import numpy as np
from cython.parallel import prange

from libc.math cimport INFINITY


cdef void _row(int row, const double[:, ::1] xy, const double[:, ::1] tz,
               const double[::1] area, const long[:, ::1] bbox,
               int[:, ::1] face_id, double[:, ::1] depth, double[:, :, ::1] bary) noexcept nogil:
    cdef Py_ssize_t f, n_faces = xy.shape[0]
    cdef long col
    cdef double py = row + 0.5
    cdef double px, x0, y0, x1, y1, x2, y2, a, e0, e1, e2, l0, l1, l2, w, d
    for f in range(n_faces):
        if row < bbox[f, 2] or row > bbox[f, 3]:
            continue
        x0 = xy[f, 0]; y0 = xy[f, 1]; x1 = xy[f, 2]; y1 = xy[f, 3]; x2 = xy[f, 4]; y2 = xy[f, 5]
        a = area[f]
        for col in range(bbox[f, 0], bbox[f, 1] + 1):
            px = col + 0.5
            e0 = (x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)
            if e0 > 0.0:
                continue
            e1 = (x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)
            if e1 > 0.0:
                continue
            e2 = (x0 - px) * (y1 - py) - (x1 - px) * (y0 - py)
            if e2 > 0.0:
                continue
            l0 = e0 / a
            l1 = e1 / a
            l2 = e2 / a
            w = l0 / tz[f, 0] + l1 / tz[f, 1] + l2 / tz[f, 2]
            d = 1.0 / w
            if d < depth[row, col]:
                depth[row, col] = d
                face_id[row, col] = <int>f
                bary[row, col, 0] = (l0 / tz[f, 0]) * d
                bary[row, col, 1] = (l1 / tz[f, 1]) * d
                bary[row, col, 2] = (l2 / tz[f, 2]) * d


def raster_kernel(double[:, ::1] xy, double[:, ::1] tz, double[::1] area, long[:, ::1] bbox,
                  int width, int height, int nthreads):
    face_id = np.full((height, width), -1, dtype=np.int32)
    depth = np.full((height, width), np.inf, dtype=np.float64)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    cdef int[:, ::1] fid_v = face_id
    cdef double[:, ::1] depth_v = depth
    cdef double[:, :, ::1] bary_v = bary
    cdef int row
    with nogil:
        for row in prange(height, num_threads=nthreads, schedule="static"):
            _row(row, xy, tz, area, bbox, fid_v, depth_v, bary_v)
    return face_id, depth, bary
