"""ped3d: instance-mask driven 3D pedestrian proposals and evaluation.

Library layout mirrors the pipeline: geometry and kitti_io at the
bottom; proposal, augment, voxel, and loss in the middle; evaluation
and the CLI on top. The hot BEV IoU kernel lives in _kernels with a
compiled fast path and a pure-Python fallback.
"""

__version__ = "0.1.0"

from ped3d.geometry import (  # noqa: F401
    Box3D,
    Calibration,
    bev_iou,
    bev_iou_matrix,
    bev_polygon,
    box_corners_3d,
    planar_range,
    project_points,
)
from ped3d.kitti_io import Frame, LabelRecord, InstanceMaskSet  # noqa: F401
from ped3d.proposal import MeanBoxConfig, Proposal, propose_frame  # noqa: F401
