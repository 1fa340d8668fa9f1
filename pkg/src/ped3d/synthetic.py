"""Deterministic synthetic scenes for testing the pipeline end to end.

Pedestrian points are sampled the way a spinning LiDAR sees a body:
a handful of azimuth columns across the silhouette (their count grows
as the range shrinks), small depth jitter toward the sensor, vertical
spread over the body height. All sampled offsets stay inside the
box's inscribed BEV circle so every point lies inside its box for any
yaw.

Masks are exact: each pedestrian's mask pixels are precisely the
pixels its retained points project into. Where two pedestrians claim
one pixel the nearer point wins and the occluded points are dropped
from the cloud, keeping masks disjoint and the point-to-mask oracle
tight. Clutter (ground-plane returns) never lands inside a mask for
the same reason.
"""

import math
from dataclasses import dataclass

import numpy as np

from ped3d.geometry import Box3D, Calibration, cam_to_velo, project_cam
from ped3d.kitti_io import (
    Frame,
    InstanceMaskSet,
    LabelRecord,
    MaskInstance,
    box_to_label,
    encode_mask_pixels,
)

# nominal KITTI camera-2 intrinsics and velodyne->camera axis swap
SYNTHETIC_IMAGE_SIZE = (1242, 375)
_P2 = np.array([
    [721.5377, 0.0, 609.5593, 0.0],
    [0.0, 721.5377, 172.854, 0.0],
    [0.0, 0.0, 1.0, 0.0],
])
_TR_VELO_TO_CAM = np.array([
    [0.0, -1.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0, 0.0],
])

AZIMUTH_RESOLUTION = 0.003   # rad between scan columns, HDL-64-ish
_DEPTH_JITTER = 0.1          # m of body-surface depth, toward the sensor
_COLUMN_JITTER = 0.01


def synthetic_calibration() -> Calibration:
    return Calibration(
        P2=_P2,
        R0_rect=np.eye(3),
        Tr_velo_to_cam=_TR_VELO_TO_CAM,
        image_width=SYNTHETIC_IMAGE_SIZE[0],
        image_height=SYNTHETIC_IMAGE_SIZE[1],
    )


@dataclass(frozen=True)
class PedestrianSpec:
    """Where a synthetic pedestrian stands (BEV, camera frame) and its size."""

    x: float
    z: float
    theta: float = 0.0
    l: float = 0.84
    w: float = 0.66
    h: float = 1.76
    n_points: int | None = None   # None: scaled with 1/range^2


@dataclass(frozen=True)
class SceneSpec:
    pedestrians: tuple[PedestrianSpec, ...] = ()
    clutter_points: int = 0
    ground_y: float = 1.65                      # camera height above road
    ground_x_range: tuple[float, float] = (-15.0, 15.0)
    ground_z_range: tuple[float, float] = (4.0, 70.0)
    points_scale: float = 22000.0               # n ~ scale / range^2
    max_points_per_object: int = 400


def _pedestrian_points(spec: PedestrianSpec, box: Box3D, n: int, rng) -> np.ndarray:
    rng_range = math.hypot(spec.x, spec.z)
    los = np.array([spec.x, spec.z]) / rng_range
    perp = np.array([-los[1], los[0]])
    r_sil = 0.45 * min(box.l, box.w)
    n_cols = int(np.clip(round(2.0 * r_sil / (rng_range * AZIMUTH_RESOLUTION)), 1, n))
    col_t = np.linspace(-r_sil, r_sil, n_cols) if n_cols > 1 else np.zeros(1)
    cols = rng.integers(0, n_cols, size=n)
    t = col_t[cols] + rng.uniform(-_COLUMN_JITTER, _COLUMN_JITTER, size=n)
    d = rng.uniform(0.0, _DEPTH_JITTER, size=n)
    bev = np.array([spec.x, spec.z]) + t[:, None] * perp - d[:, None] * los
    y = rng.uniform(box.cy - 0.45 * box.h, box.cy + 0.45 * box.h, size=n)
    return np.stack([bev[:, 0], y, bev[:, 1]], axis=1)


def generate_synthetic_frame(scene: SceneSpec, seed: int, frame_id: str = "000000") -> Frame:
    """Build a fully consistent Frame; identical seeds give identical frames."""
    calib = synthetic_calibration()
    rng = np.random.default_rng(seed)
    width, height = calib.image_width, calib.image_height

    instance_points = []   # camera-frame (n, 3) per pedestrian
    boxes = []
    for spec in scene.pedestrians:
        cy = scene.ground_y - 0.5 * spec.h
        box = Box3D(spec.x, cy, spec.z, spec.l, spec.w, spec.h, theta=spec.theta)
        boxes.append(box)
        if spec.n_points is not None:
            n = spec.n_points
        else:
            r = math.hypot(spec.x, spec.z)
            n = int(np.clip(round(scene.points_scale / (r * r)), 2, scene.max_points_per_object))
        instance_points.append(_pedestrian_points(spec, box, n, rng))

    clutter = np.empty((0, 3))
    if scene.clutter_points > 0:
        gx = rng.uniform(*scene.ground_x_range, size=scene.clutter_points)
        gz = rng.uniform(*scene.ground_z_range, size=scene.clutter_points)
        gy = np.full(scene.clutter_points, scene.ground_y)
        clutter = np.stack([gx, gy, gz], axis=1)

    # pixel ownership: nearest point wins, ties to the lower instance id
    owner: dict[int, tuple[float, int]] = {}
    projections = []
    for inst_idx, pts in enumerate(instance_points):
        u, v, depth = project_cam(pts, calib.P2)
        visible = (depth > 0) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        pix = np.floor(v).astype(np.int64) * width + np.floor(u).astype(np.int64)
        projections.append((visible, pix))
        for k in np.nonzero(visible)[0]:
            key = int(pix[k])
            claim = (float(depth[k]), inst_idx)
            if key not in owner or claim < owner[key]:
                owner[key] = claim

    kept_points = []
    mask_instances = []
    labels = []
    for inst_idx, (spec, box, pts) in enumerate(zip(scene.pedestrians, boxes, instance_points)):
        visible, pix = projections[inst_idx]
        keep = visible.copy()
        for k in np.nonzero(visible)[0]:
            if owner[int(pix[k])][1] != inst_idx:
                keep[k] = False
        kept = pts[keep]
        kept_points.append(kept)
        pixels = np.unique(pix[keep])
        if pixels.size:
            mask_instances.append(
                MaskInstance(
                    instance_id=inst_idx + 1,
                    class_name="Pedestrian",
                    score=1.0,
                    rle=encode_mask_pixels(pixels),
                )
            )
            us, vs = pixels % width, pixels // width
            bbox = (float(us.min()), float(vs.min()), float(us.max() + 1), float(vs.max() + 1))
            labels.append(box_to_label(box, bbox=bbox))
        else:
            # fully occluded: still a ground-truth object, just no mask
            labels.append(box_to_label(box, calib=calib))

    owned = set(owner)
    if clutter.size:
        u, v, depth = project_cam(clutter, calib.P2)
        visible = (depth > 0) & (u >= 0) & (u < width) & (v >= 0) & (v < height)
        pix = np.floor(v).astype(np.int64) * width + np.floor(u).astype(np.int64)
        keep = visible.copy()
        for k in np.nonzero(visible)[0]:
            if int(pix[k]) in owned:
                keep[k] = False
        kept_points.append(clutter[keep])

    if kept_points:
        pts_cam = np.concatenate(kept_points, axis=0)
    else:
        pts_cam = np.empty((0, 3))
    reflect = rng.uniform(0.0, 1.0, size=len(pts_cam))
    pts_velo = cam_to_velo(pts_cam, calib) if len(pts_cam) else np.empty((0, 3))
    cloud = np.concatenate([pts_velo, reflect[:, None]], axis=1).astype(np.float32)

    masks = InstanceMaskSet(width, height, tuple(mask_instances))
    return Frame(frame_id, cloud, calib, masks=masks, labels=labels)


def random_scene(rng, n_pedestrians: int | None = None, clutter_points: int | None = None) -> SceneSpec:
    """Draw a varied scene spec: 1-4 pedestrians spread over 5-55 m."""
    if n_pedestrians is None:
        n_pedestrians = int(rng.integers(1, 5))
    if clutter_points is None:
        clutter_points = int(rng.integers(100, 400))
    peds = []
    for _ in range(n_pedestrians):
        r = rng.uniform(5.0, 55.0)
        half_fov = 0.38  # rad, stays comfortably inside the image
        az = rng.uniform(-half_fov, half_fov)
        peds.append(
            PedestrianSpec(
                x=r * math.sin(az),
                z=r * math.cos(az),
                theta=rng.uniform(-math.pi, math.pi),
                l=rng.uniform(0.7, 1.0),
                w=rng.uniform(0.55, 0.8),
                h=rng.uniform(1.55, 1.95),
            )
        )
    return SceneSpec(pedestrians=tuple(peds), clutter_points=clutter_points)


def synthetic_corpus(n_frames: int, seed: int) -> list[Frame]:
    """A list of varied frames, ids 000000..; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_frames):
        scene = random_scene(rng)
        frames.append(generate_synthetic_frame(scene, seed=int(rng.integers(2**31)), frame_id=f"{i:06d}"))
    return frames
