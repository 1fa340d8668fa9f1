"""Pure-Python rotated-rectangle IoU via convex polygon clipping.

Fallback for the compiled extension in ``_bev_iou.pyx``. Both
implementations run the same arithmetic in the same order so results
agree bit for bit; this one is the reference, the extension is the
fast path.

Quads are (4, 2) arrays of footprint vertices in counter-clockwise
order. Intersection areas below ``AREA_EPS`` count as zero.
"""

import numpy as np

AREA_EPS = 1e-12


def _area(xs, ys):
    # shoelace, positive for counter-clockwise rings
    n = len(xs)
    acc = 0.0
    for i in range(n):
        j = i + 1
        if j == n:
            j = 0
        acc += xs[i] * ys[j] - xs[j] * ys[i]
    return 0.5 * acc


def _clip_convex(sx, sy, cx, cy):
    """Sutherland-Hodgman clip of subject polygon by convex CCW clipper."""
    for e in range(4):
        f = e + 1
        if f == 4:
            f = 0
        ax, ay = cx[e], cy[e]
        ex, ey = cx[f] - ax, cy[f] - ay
        out_x, out_y = [], []
        n = len(sx)
        if n == 0:
            break
        # cross((b-a), (p-a)) >= 0 keeps points on the interior side
        dp = ex * (sy[0] - ay) - ey * (sx[0] - ax)
        for i in range(n):
            j = i + 1
            if j == n:
                j = 0
            dq = ex * (sy[j] - ay) - ey * (sx[j] - ax)
            if dp >= 0.0:
                out_x.append(sx[i])
                out_y.append(sy[i])
                if dq < 0.0:
                    t = dp / (dp - dq)
                    out_x.append(sx[i] + t * (sx[j] - sx[i]))
                    out_y.append(sy[i] + t * (sy[j] - sy[i]))
            elif dq >= 0.0:
                t = dp / (dp - dq)
                out_x.append(sx[i] + t * (sx[j] - sx[i]))
                out_y.append(sy[i] + t * (sy[j] - sy[i]))
            dp = dq
        sx, sy = out_x, out_y
    return sx, sy


def _iou(ax, ay, bx, by):
    area_a = _area(ax, ay)
    area_b = _area(bx, by)
    ix, iy = _clip_convex(ax, ay, bx, by)
    inter = _area(ix, iy) if len(ix) >= 3 else 0.0
    if inter < AREA_EPS:
        inter = 0.0
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    iou = inter / union
    if iou < 0.0:
        return 0.0
    if iou > 1.0:
        return 1.0
    return iou


def _cols(quad):
    q = np.asarray(quad, dtype=np.float64)
    return [q[0, 0], q[1, 0], q[2, 0], q[3, 0]], [q[0, 1], q[1, 1], q[2, 1], q[3, 1]]


def iou_quad(a, b):
    """IoU of two convex CCW quads given as (4, 2) vertex arrays."""
    ax, ay = _cols(a)
    bx, by = _cols(b)
    return _iou(ax, ay, bx, by)


def iou_pairs(quads_a, quads_b):
    """Elementwise IoU of two equal-length (N, 4, 2) quad stacks."""
    qa = np.asarray(quads_a, dtype=np.float64)
    qb = np.asarray(quads_b, dtype=np.float64)
    if qa.shape != qb.shape:
        raise ValueError("quad stacks must have equal shapes")
    out = np.empty(qa.shape[0], dtype=np.float64)
    for i in range(qa.shape[0]):
        out[i] = iou_quad(qa[i], qb[i])
    return out


def iou_matrix(quads_a, quads_b):
    """All-pairs IoU, shape (N, M), of two quad stacks."""
    qa = np.asarray(quads_a, dtype=np.float64)
    qb = np.asarray(quads_b, dtype=np.float64)
    out = np.empty((qa.shape[0], qb.shape[0]), dtype=np.float64)
    cols_b = [_cols(qb[j]) for j in range(qb.shape[0])]
    for i in range(qa.shape[0]):
        ax, ay = _cols(qa[i])
        row = out[i]
        for j, (bx, by) in enumerate(cols_b):
            row[j] = _iou(ax, ay, bx, by)
    return out
