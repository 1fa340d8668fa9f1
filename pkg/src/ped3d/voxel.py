"""ROI cropping and the 64x64x9 BEV voxel encoding of proposal crops.

The grid is BEV-major: 64 cells along x, 64 along z, 9 along height.
Height is measured upward (-y) from the grid bottom, so "highest
point" is the physically highest. Each cell carries the max height of
its points and a density normalized by the fullest cell of the grid;
empty cells hold density 0 and the bottom height 0 as sentinel.

Grids serialize to a flat little-endian float32 tensor of shape
(2, 64, 64, 9), channels (max_height, density), C row-major with axis
order (channel, x, z, height), plus a JSON sidecar holding origin,
cell sizes, and this layout description.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ped3d.geometry import Box3D, Calibration, box_corners_3d, project_cam

GRID_SHAPE = (64, 64, 9)   # x, z, height cells
ROI_SCALE = 1.5


@dataclass(frozen=True)
class Roi2D:
    """Pixel rectangle, half-open, clamped to the image."""

    left: float
    top: float
    right: float
    bottom: float

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top


def image_roi(box: Box3D, calib: Calibration) -> Roi2D:
    """Project the box corners, take their extent, scale it by 1.5.

    Scaling is about the extent center and enlarges the context the
    image crop carries. Raises ValueError for a box entirely behind
    the camera.
    """
    corners = box_corners_3d(box)
    front = corners[:, 2] > 1e-9
    if not front.any():
        raise ValueError("box is fully behind the camera")
    u, v, _ = project_cam(corners[front], calib.P2)
    cu, cv = 0.5 * (u.min() + u.max()), 0.5 * (v.min() + v.max())
    half_w = 0.5 * (u.max() - u.min()) * ROI_SCALE
    half_h = 0.5 * (v.max() - v.min()) * ROI_SCALE
    left = max(cu - half_w, 0.0)
    right = min(cu + half_w, float(calib.image_width))
    top = max(cv - half_h, 0.0)
    bottom = min(cv + half_h, float(calib.image_height))
    return Roi2D(left, top, max(right, left), max(bottom, top))


def crop_cloud(cloud, box: Box3D, extent) -> np.ndarray:
    """Axis-aligned crop around the proposal center.

    ``extent`` is the half-width per axis (scalar or (ex, ey, ez));
    bounds are half-open, center - e <= p < center + e. Extra columns
    (reflectance) pass through.
    """
    e = np.broadcast_to(np.asarray(extent, dtype=np.float64), 3)
    if not (e > 0).all():
        raise ValueError("crop extent must be positive")
    p = np.asarray(cloud)
    center = np.array([box.cx, box.cy, box.cz])
    lo, hi = center - e, center + e
    keep = ((p[:, :3] >= lo) & (p[:, :3] < hi)).all(axis=1)
    return p[keep]


@dataclass(frozen=True)
class VoxelGrid:
    max_height: np.ndarray   # (64, 64, 9) float32, height above grid bottom
    density: np.ndarray      # (64, 64, 9) float32 in [0, 1]
    origin: tuple[float, float, float]     # (x_min, y_bottom, z_min), camera frame
    cell_size: tuple[float, float, float]  # (dx, dheight, dz) meters


def voxelize(points, box_center, grid_extent=(4.0, 3.0, 4.0)) -> VoxelGrid:
    """Scatter camera-frame points into the fixed 64x64x9 grid.

    ``grid_extent`` is the full physical size (x, y, z) centered on
    ``box_center``; points outside it are ignored. Deterministic and
    independent of input point order.
    """
    ex, ey, ez = (float(v) for v in grid_extent)
    if min(ex, ey, ez) <= 0:
        raise ValueError("grid extent must be positive")
    cx, cy, cz = (float(v) for v in box_center)
    nx, nz, nh = GRID_SHAPE
    x_min, z_min = cx - 0.5 * ex, cz - 0.5 * ez
    y_bottom = cy + 0.5 * ey
    dx, dz, dh = ex / nx, ez / nz, ey / nh

    counts = np.zeros(GRID_SHAPE, dtype=np.int64)
    heights = np.zeros(GRID_SHAPE, dtype=np.float64)
    p = np.asarray(points, dtype=np.float64)
    if p.size:
        h = y_bottom - p[:, 1]   # height above grid bottom, up is -y
        ix = np.floor((p[:, 0] - x_min) / dx).astype(np.int64)
        iz = np.floor((p[:, 2] - z_min) / dz).astype(np.int64)
        ih = np.floor(h / dh).astype(np.int64)
        ok = (ix >= 0) & (ix < nx) & (iz >= 0) & (iz < nz) & (ih >= 0) & (ih < nh)
        ix, iz, ih, h = ix[ok], iz[ok], ih[ok], h[ok]
        np.add.at(counts, (ix, iz, ih), 1)
        np.maximum.at(heights, (ix, iz, ih), h)

    peak = counts.max()
    density = counts / peak if peak > 0 else counts.astype(np.float64)
    return VoxelGrid(
        max_height=heights.astype(np.float32),
        density=density.astype(np.float32),
        origin=(x_min, y_bottom, z_min),
        cell_size=(dx, dh, dz),
    )


def crop_and_voxelize(cloud_cam, box: Box3D, grid_extent=(4.0, 3.0, 4.0)) -> VoxelGrid:
    """Crop to the grid extent and voxelize in one step."""
    half = tuple(0.5 * float(v) for v in grid_extent)
    cropped = crop_cloud(cloud_cam, box, half)
    return voxelize(cropped[:, :3], (box.cx, box.cy, box.cz), grid_extent)


def write_voxel_tensor(grid: VoxelGrid, bin_path, sidecar_path=None) -> None:
    """Write the (2, 64, 64, 9) float32 tensor plus its JSON sidecar."""
    bin_path = Path(bin_path)
    tensor = np.stack([grid.max_height, grid.density]).astype("<f4")
    bin_path.write_bytes(np.ascontiguousarray(tensor).tobytes())
    sidecar = {
        "shape": [2, *GRID_SHAPE],
        "dtype": "<f4",
        "order": "C",
        "axes": ["channel", "x", "z", "height"],
        "channels": ["max_height", "density"],
        "origin": list(grid.origin),
        "cell_size": list(grid.cell_size),
    }
    if sidecar_path is None:
        sidecar_path = bin_path.with_suffix(".json")
    Path(sidecar_path).write_text(json.dumps(sidecar, indent=1))


def read_voxel_tensor(bin_path, sidecar_path=None) -> VoxelGrid:
    bin_path = Path(bin_path)
    if sidecar_path is None:
        sidecar_path = bin_path.with_suffix(".json")
    meta = json.loads(Path(sidecar_path).read_text())
    tensor = np.frombuffer(bin_path.read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"])
    return VoxelGrid(
        max_height=tensor[0].copy(),
        density=tensor[1].copy(),
        origin=tuple(meta["origin"]),
        cell_size=tuple(meta["cell_size"]),
    )
