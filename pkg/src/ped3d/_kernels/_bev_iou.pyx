# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled rotated-rectangle IoU kernel.

Mirrors ``pure.py`` operation for operation so the two paths return
bit-identical results; see that module for the algorithm notes.
"""

import numpy as np

cdef double AREA_EPS = 1e-12
DEF MAXV = 16


cdef double _area(double* xs, double* ys, int n) noexcept nogil:
    cdef double acc = 0.0
    cdef int i, j
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        acc += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * acc


cdef int _clip_convex(double* sx, double* sy, int n,
                      const double* cx, const double* cy) noexcept nogil:
    cdef double ox[MAXV]
    cdef double oy[MAXV]
    cdef double ax, ay, ex, ey, dp, dq, t
    cdef int e, f, i, j, m
    for e in range(4):
        f = e + 1
        if f == 4:
            f = 0
        ax = cx[e]
        ay = cy[e]
        ex = cx[f] - ax
        ey = cy[f] - ay
        m = 0
        if n == 0:
            break
        dp = ex * (sy[0] - ay) - ey * (sx[0] - ax)
        for i in range(n):
            j = i + 1
            if j == n:
                j = 0
            dq = ex * (sy[j] - ay) - ey * (sx[j] - ax)
            if dp >= 0.0:
                ox[m] = sx[i]
                oy[m] = sy[i]
                m += 1
                if dq < 0.0:
                    t = dp / (dp - dq)
                    ox[m] = sx[i] + t * (sx[j] - sx[i])
                    oy[m] = sy[i] + t * (sy[j] - sy[i])
                    m += 1
            elif dq >= 0.0:
                t = dp / (dp - dq)
                ox[m] = sx[i] + t * (sx[j] - sx[i])
                oy[m] = sy[i] + t * (sy[j] - sy[i])
                m += 1
            dp = dq
        for i in range(m):
            sx[i] = ox[i]
            sy[i] = oy[i]
        n = m
    return n


cdef double _iou(const double* ax, const double* ay,
                 const double* bx, const double* by) noexcept nogil:
    cdef double wx[MAXV]
    cdef double wy[MAXV]
    cdef double area_a, area_b, inter, union_, iou
    cdef int i, n
    area_a = _area(<double*> ax, <double*> ay, 4)
    area_b = _area(<double*> bx, <double*> by, 4)
    for i in range(4):
        wx[i] = ax[i]
        wy[i] = ay[i]
    n = _clip_convex(wx, wy, 4, bx, by)
    inter = _area(wx, wy, n) if n >= 3 else 0.0
    if inter < AREA_EPS:
        inter = 0.0
    union_ = area_a + area_b - inter
    if union_ <= 0.0:
        return 0.0
    iou = inter / union_
    if iou < 0.0:
        return 0.0
    if iou > 1.0:
        return 1.0
    return iou


cdef void _load(const double[:, ::1] q, double* xs, double* ys) noexcept nogil:
    cdef int i
    for i in range(4):
        xs[i] = q[i, 0]
        ys[i] = q[i, 1]


def iou_quad(a, b):
    """IoU of two convex CCW quads given as (4, 2) vertex arrays."""
    cdef const double[:, ::1] qa = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] qb = np.ascontiguousarray(b, dtype=np.float64)
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    _load(qa, ax, ay)
    _load(qb, bx, by)
    return _iou(ax, ay, bx, by)


def iou_pairs(quads_a, quads_b):
    """Elementwise IoU of two equal-length (N, 4, 2) quad stacks."""
    cdef const double[:, :, ::1] qa = np.ascontiguousarray(quads_a, dtype=np.float64)
    cdef const double[:, :, ::1] qb = np.ascontiguousarray(quads_b, dtype=np.float64)
    if qa.shape[0] != qb.shape[0] or qa.shape[1] != 4 or qb.shape[1] != 4:
        raise ValueError("quad stacks must have equal shapes")
    out = np.empty(qa.shape[0], dtype=np.float64)
    cdef double[::1] res = out
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef Py_ssize_t i
    with nogil:
        for i in range(qa.shape[0]):
            _load(qa[i], ax, ay)
            _load(qb[i], bx, by)
            res[i] = _iou(ax, ay, bx, by)
    return out


def iou_matrix(quads_a, quads_b):
    """All-pairs IoU, shape (N, M), of two quad stacks."""
    cdef const double[:, :, ::1] qa = np.ascontiguousarray(quads_a, dtype=np.float64)
    cdef const double[:, :, ::1] qb = np.ascontiguousarray(quads_b, dtype=np.float64)
    out = np.empty((qa.shape[0], qb.shape[0]), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double ax[4]
    cdef double ay[4]
    cdef double bx[4]
    cdef double by[4]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(qa.shape[0]):
            _load(qa[i], ax, ay)
            for j in range(qb.shape[0]):
                _load(qb[j], bx, by)
                res[i, j] = _iou(ax, ay, bx, by)
    return out
