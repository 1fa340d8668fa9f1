"""Instance-mask driven proposal generation.

Four steps: ingest instance masks, assign LiDAR points to the mask
they project into, turn every assigned point into a mean-sized box
proposal, then suppress duplicates per instance. Suppression is
scored by inlier count and runs independently per instance id, so an
instance with at least one assigned point always keeps at least one
proposal.
"""

import json
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ped3d import _kernels
from ped3d.geometry import Box3D, bev_polygons, project_points, velo_to_cam
from ped3d.kitti_io import Frame, decode_id_map


@dataclass(frozen=True)
class MeanBoxConfig:
    """Mean pedestrian box dimensions used for every proposal.

    The defaults are the mean pedestrian label dimensions over the
    KITTI training split (the stats command reproduces this kind of
    aggregate); override per dataset as needed.
    """

    l: float = 0.84
    w: float = 0.66
    h: float = 1.76

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError("mean box dimensions must be positive")


@dataclass(frozen=True)
class Proposal:
    box: Box3D
    instance_id: int
    inlier_count: int
    source_point_index: int


def assign_points_to_instances(frame: Frame) -> list[tuple[int, int]]:
    """Map cloud points to the instance mask their pixel falls in.

    Returns (point_index, instance_id) pairs in ascending point order;
    points projecting outside the image or outside every mask are
    dropped. Pixel membership takes floor(u), floor(v).
    """
    if frame.masks is None:
        raise ValueError(f"frame {frame.frame_id} has no instance masks")
    if len(frame.masks.instances) == 0 or len(frame.cloud) == 0:
        return []
    idx, u, v = project_points(frame.cloud, frame.calib)
    id_map = decode_id_map(frame.masks)
    ids = id_map[np.floor(v).astype(np.intp), np.floor(u).astype(np.intp)]
    hit = ids >= 0
    return list(zip(idx[hit].tolist(), ids[hit].tolist()))


def generate_proposals(
    assignments: list[tuple[int, int]],
    points_cam: np.ndarray,
    mean_box: MeanBoxConfig,
) -> list[Proposal]:
    """One axis-aligned mean-box proposal per assigned point.

    ``points_cam`` holds camera-frame positions indexed by the
    assignment point indices. The generating point becomes the box's
    volumetric center; the inlier count is the number of points
    sharing the proposal's instance id.
    """
    counts = Counter(iid for _, iid in assignments)
    out = []
    for point_index, instance_id in assignments:
        x, y, z = points_cam[point_index, :3]
        box = Box3D(float(x), float(y), float(z), mean_box.l, mean_box.w, mean_box.h, theta=0.0)
        out.append(Proposal(box, instance_id, counts[instance_id], point_index))
    return out


def instance_nms(proposals: list[Proposal], iou_threshold: float = 0.5) -> list[Proposal]:
    """Greedy BEV NMS run independently within each instance id group.

    Score is the inlier count (ties fall back to the lower source
    point index), suppression is BEV IoU >= threshold. Output keeps
    instance groups in ascending id order and survivors in greedy
    order, so identical input yields identical output.
    """
    groups: dict[int, list[Proposal]] = {}
    for p in proposals:
        groups.setdefault(p.instance_id, []).append(p)

    survivors: list[Proposal] = []
    for instance_id in sorted(groups):
        group = sorted(groups[instance_id], key=lambda p: (-p.inlier_count, p.source_point_index))
        quads = bev_polygons([p.box for p in group])
        alive = np.ones(len(group), dtype=bool)
        for i in range(len(group)):
            if not alive[i]:
                continue
            survivors.append(group[i])
            rest = np.nonzero(alive)[0]
            rest = rest[rest > i]
            if rest.size:
                head = np.broadcast_to(quads[i], (rest.size, 4, 2))
                ious = _kernels.iou_pairs(np.ascontiguousarray(head), quads[rest])
                alive[rest[ious >= iou_threshold]] = False
    return survivors


def propose_frame(
    frame: Frame,
    mean_box: MeanBoxConfig,
    iou_threshold: float = 0.5,
) -> list[Proposal]:
    """Full proposal pipeline for one frame (assignment, boxes, NMS)."""
    assignments = assign_points_to_instances(frame)
    if not assignments:
        return []
    points_cam = velo_to_cam(frame.cloud, frame.calib)
    return instance_nms(generate_proposals(assignments, points_cam, mean_box), iou_threshold)


def proposal_to_record(proposal: Proposal, frame_id: str) -> dict:
    """JSON-lines record for the CLI pipeline hand-off."""
    b = proposal.box
    return {
        "frame_id": frame_id,
        "instance_id": proposal.instance_id,
        "inlier_count": proposal.inlier_count,
        "box": {"cx": b.cx, "cy": b.cy, "cz": b.cz, "l": b.l, "w": b.w, "h": b.h, "theta": b.theta},
    }


def proposal_from_record(record: dict) -> Proposal:
    b = record["box"]
    box = Box3D(b["cx"], b["cy"], b["cz"], b["l"], b["w"], b["h"], theta=b["theta"])
    return Proposal(
        box,
        instance_id=int(record["instance_id"]),
        inlier_count=int(record["inlier_count"]),
        source_point_index=int(record.get("source_point_index", -1)),
    )


def dump_proposals(proposals: list[Proposal], frame_id: str) -> str:
    return "".join(json.dumps(proposal_to_record(p, frame_id)) + "\n" for p in proposals)


def load_proposals(text: str) -> list[tuple[str, Proposal]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            record = json.loads(line)
            out.append((record["frame_id"], proposal_from_record(record)))
    return out
