"""IoU kernel selection: compiled extension if built, else pure Python.

``HAVE_COMPILED`` tells callers (and the benchmark) which path is
active. The pure module stays importable either way so the two can be
compared directly.
"""

from ped3d._kernels import pure

try:
    from ped3d._kernels import _bev_iou as _impl

    HAVE_COMPILED = True
except ImportError:
    _impl = pure
    HAVE_COMPILED = False

iou_quad = _impl.iou_quad
iou_pairs = _impl.iou_pairs
iou_matrix = _impl.iou_matrix

__all__ = ["HAVE_COMPILED", "iou_quad", "iou_pairs", "iou_matrix", "pure"]
