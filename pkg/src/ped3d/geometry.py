"""Coordinate transforms, oriented-box geometry, and rotated BEV IoU.

Conventions follow KITTI. Points live in the rectified camera frame
(x right, y down, z forward) unless stated otherwise; the up axis is
-y, so a box's bottom face is its maximal-y face. Yaw uses the devkit
rotation about the camera y axis:

    x' =  cos(t) * x + sin(t) * z
    z' = -sin(t) * x + cos(t) * z

Point clouds are numpy arrays: velodyne scans are (N, 4) float32
(x, y, z, reflectance in the velodyne frame), camera-frame positions
are (N, 3) float64.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ped3d import _kernels


def normalize_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, math.tau)
    if t <= -math.pi:
        t += math.tau
    return t


@dataclass(frozen=True)
class Calibration:
    """KITTI projection and frame-transform matrices plus image size."""

    P2: np.ndarray            # 3x4 camera projection
    R0_rect: np.ndarray       # 3x3 rectification
    Tr_velo_to_cam: np.ndarray  # 3x4 rigid velodyne -> camera
    image_width: int
    image_height: int

    def __post_init__(self):
        object.__setattr__(self, "P2", np.asarray(self.P2, dtype=np.float64).reshape(3, 4))
        object.__setattr__(self, "R0_rect", np.asarray(self.R0_rect, dtype=np.float64).reshape(3, 3))
        object.__setattr__(
            self, "Tr_velo_to_cam", np.asarray(self.Tr_velo_to_cam, dtype=np.float64).reshape(3, 4)
        )
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        err = np.abs(self.R0_rect @ self.R0_rect.T - np.eye(3)).max()
        if err > 1e-4:
            raise ValueError(f"R0_rect is not orthonormal (max deviation {err:.3g})")


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box, volumetric center in the rectified camera frame.

    Note the center convention differs from KITTI label files, whose y
    is the bottom-face center; conversion happens at the I/O boundary
    (see kitti_io.label_to_box / box_to_label).
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    theta: float = 0.0
    class_id: str = "Pedestrian"
    score: float = 1.0

    def __post_init__(self):
        if not (self.l > 0.0 and self.w > 0.0 and self.h > 0.0):
            raise ValueError(f"box dimensions must be positive, got {self.l}, {self.w}, {self.h}")
        for v in (self.cx, self.cy, self.cz, self.theta):
            if not math.isfinite(v):
                raise ValueError("box parameters must be finite")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])


class ProjectedPoints(NamedTuple):
    """Image-plane projections of selected cloud points (pixels, real-valued)."""

    indices: np.ndarray
    u: np.ndarray
    v: np.ndarray


def velo_to_cam(points, calib: Calibration) -> np.ndarray:
    """Transform (N, 3+) velodyne-frame points to rectified camera frame."""
    p = np.asarray(points, dtype=np.float64)[:, :3]
    tr = calib.Tr_velo_to_cam
    ref = p @ tr[:, :3].T + tr[:, 3]
    return ref @ calib.R0_rect.T


def cam_to_velo(points, calib: Calibration) -> np.ndarray:
    """Inverse of velo_to_cam for (N, 3+) rectified camera-frame points."""
    p = np.asarray(points, dtype=np.float64)[:, :3]
    ref = p @ calib.R0_rect  # R0 is orthonormal
    tr = calib.Tr_velo_to_cam
    return np.linalg.solve(tr[:, :3], (ref - tr[:, 3]).T).T


def project_cam(points_cam, P2) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project (N, 3) rectified camera-frame points; returns (u, v, depth)."""
    p = np.asarray(points_cam, dtype=np.float64)
    P2 = np.asarray(P2, dtype=np.float64)
    hom = p @ P2[:, :3].T + P2[:, 3]
    u = hom[:, 0] / hom[:, 2]
    v = hom[:, 1] / hom[:, 2]
    return u, v, p[:, 2]


def project_points(cloud, calib: Calibration) -> ProjectedPoints:
    """Project a velodyne cloud into the image.

    Keeps exactly the points with positive rectified-camera depth whose
    projection lands inside the image; (u, v) stay real-valued, callers
    that need pixels take the floor.
    """
    pts_cam = velo_to_cam(cloud, calib)
    front = pts_cam[:, 2] > 0.0
    idx = np.nonzero(front)[0]
    u, v, _ = project_cam(pts_cam[front], calib.P2)
    inside = (u >= 0.0) & (u < calib.image_width) & (v >= 0.0) & (v < calib.image_height)
    return ProjectedPoints(idx[inside], u[inside], v[inside])


def _footprint_offsets(l: float, w: float) -> np.ndarray:
    h_l, h_w = 0.5 * l, 0.5 * w
    return np.array([[h_l, h_w], [-h_l, h_w], [-h_l, -h_w], [h_l, -h_w]])


def bev_polygon(box: Box3D) -> np.ndarray:
    """Footprint rectangle of a box as a (4, 2) CCW array of (x, z) vertices."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    base = _footprint_offsets(box.l, box.w)
    x = c * base[:, 0] + s * base[:, 1]
    z = -s * base[:, 0] + c * base[:, 1]
    return np.stack([x + box.cx, z + box.cz], axis=1)


def bev_polygons(boxes) -> np.ndarray:
    """Stacked footprints, shape (N, 4, 2), for a sequence of boxes."""
    out = np.empty((len(boxes), 4, 2), dtype=np.float64)
    for i, b in enumerate(boxes):
        out[i] = bev_polygon(b)
    return out


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Birds-eye-view IoU of two oriented boxes (footprint overlap ratio)."""
    return _kernels.iou_quad(bev_polygon(a), bev_polygon(b))


def bev_iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """All-pairs BEV IoU, shape (len(a), len(b))."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    return _kernels.iou_matrix(bev_polygons(boxes_a), bev_polygons(boxes_b))


def box_corners_3d(box: Box3D) -> np.ndarray:
    """The 8 corners of a box, shape (8, 3); rows 0-3 are the bottom face.

    Bottom means maximal y (the camera frame points y down).
    """
    c, s = math.cos(box.theta), math.sin(box.theta)
    foot = _footprint_offsets(box.l, box.w)
    x = c * foot[:, 0] + s * foot[:, 1]
    z = -s * foot[:, 0] + c * foot[:, 1]
    corners = np.empty((8, 3))
    corners[:4, 0] = corners[4:, 0] = x + box.cx
    corners[:4, 2] = corners[4:, 2] = z + box.cz
    corners[:4, 1] = box.cy + 0.5 * box.h
    corners[4:, 1] = box.cy - 0.5 * box.h
    return corners


def planar_range(box: Box3D) -> float:
    """BEV distance of the box center from the sensor origin."""
    return math.hypot(box.cx, box.cz)


def point_in_footprint(box: Box3D, xs, zs) -> np.ndarray:
    """Boolean mask of BEV points inside the box footprint (inclusive)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = np.asarray(xs, dtype=np.float64) - box.cx
    dz = np.asarray(zs, dtype=np.float64) - box.cz
    # inverse of the yaw rotation
    lx = c * dx - s * dz
    lz = s * dx + c * dz
    return (np.abs(lx) <= 0.5 * box.l) & (np.abs(lz) <= 0.5 * box.w)


def points_in_box(box: Box3D, points_cam) -> np.ndarray:
    """Boolean mask of (N, 3+) camera-frame points inside the oriented box."""
    p = np.asarray(points_cam, dtype=np.float64)
    inside = point_in_footprint(box, p[:, 0], p[:, 2])
    return inside & (np.abs(p[:, 1] - box.cy) <= 0.5 * box.h)
