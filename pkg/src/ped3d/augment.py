"""Proposal augmentation for training and the regression-target codec.

Three augmentation flavors: random displacement (uniform per-axis
offsets, original kept), grounding (snap the box bottom to the lowest
LiDAR point in a pillar around the proposal), and combined (ground
first, then displace, but only beyond a minimum range where the
ground is reliably visible; vertical displacement is suppressed for
grounded copies so the height fix survives).

Every augmented proposal is labeled by its best BEV IoU against the
ground truth: positive, close negative (near miss), or negative.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from ped3d.geometry import Box3D, bev_iou, normalize_angle, planar_range
from ped3d.proposal import Proposal

POSITIVE = "positive"
CLOSE_NEGATIVE = "close_negative"
NEGATIVE = "negative"


@dataclass(frozen=True)
class AugmentConfig:
    copies_per_proposal: int = 9
    displacement_range: float = 0.5       # m, per axis
    positive_iou: float = 0.5
    close_negative_min_iou: float = 0.05
    grounding_min_range: float = 10.0     # m, combined grounds at or beyond
    pillar_radius: float | None = None    # None: max(l, w) of the proposal

    def __post_init__(self):
        if not (0.0 <= self.close_negative_min_iou < self.positive_iou <= 1.0):
            raise ValueError("need 0 <= close_negative_min_iou < positive_iou <= 1")
        if self.copies_per_proposal < 0:
            raise ValueError("copies_per_proposal must be >= 0")


def classify_against_gt(box: Box3D, gts, config: AugmentConfig) -> str:
    """Label a box by its best BEV IoU over the ground-truth boxes."""
    best = max((bev_iou(box, gt) for gt in gts), default=0.0)
    if best >= config.positive_iou:
        return POSITIVE
    if best >= config.close_negative_min_iou:
        return CLOSE_NEGATIVE
    return NEGATIVE


def _shift(proposal: Proposal, offset) -> Proposal:
    b = proposal.box
    moved = replace(b, cx=b.cx + offset[0], cy=b.cy + offset[1], cz=b.cz + offset[2])
    return replace(proposal, box=moved)


def _displace(proposal, gts, config, rng, lock_vertical):
    out = [(proposal, classify_against_gt(proposal.box, gts, config))]
    for _ in range(config.copies_per_proposal):
        off = rng.uniform(-config.displacement_range, config.displacement_range, size=3)
        if lock_vertical:
            off[1] = 0.0
        moved = _shift(proposal, off)
        out.append((moved, classify_against_gt(moved.box, gts, config)))
    return out


def random_displace(proposal: Proposal, gts, config: AugmentConfig, seed) -> list[tuple[Proposal, str]]:
    """Original plus ``copies_per_proposal`` uniformly displaced copies.

    ``seed`` may be an int or a numpy Generator; identical seeds give
    identical output.
    """
    rng = np.random.default_rng(seed)
    return _displace(proposal, gts, config, rng, lock_vertical=False)


def ground(proposal: Proposal, points_cam, config: AugmentConfig) -> Proposal:
    """Snap the proposal bottom to the lowest point in its pillar.

    The pillar is a vertical cylinder of ``pillar_radius`` around the
    proposal center (BEV distance). Lowest means maximal y in the
    y-down camera frame; point tops are never used. An empty pillar
    returns the proposal unchanged. Idempotent.
    """
    b = proposal.box
    radius = config.pillar_radius if config.pillar_radius is not None else max(b.l, b.w)
    p = np.asarray(points_cam, dtype=np.float64)
    if p.size == 0:
        return proposal
    d2 = (p[:, 0] - b.cx) ** 2 + (p[:, 2] - b.cz) ** 2
    in_pillar = d2 <= radius * radius
    if not in_pillar.any():
        return proposal
    ground_y = float(p[in_pillar, 1].max())
    return replace(proposal, box=replace(b, cy=ground_y - 0.5 * b.h))


def combined(proposal: Proposal, points_cam, gts, config: AugmentConfig, seed) -> list[tuple[Proposal, str]]:
    """Range-gated merge: ground then displace beyond the minimum range."""
    rng = np.random.default_rng(seed)
    if planar_range(proposal.box) >= config.grounding_min_range:
        grounded = ground(proposal, points_cam, config)
        return _displace(grounded, gts, config, rng, lock_vertical=True)
    return _displace(proposal, gts, config, rng, lock_vertical=False)


@dataclass(frozen=True)
class RegressionTarget:
    """Refinement-head encoding of a ground-truth box relative to a proposal."""

    objectness: int
    dx: float
    dy: float
    dz: float
    dl: float
    dw: float
    dh: float
    s_theta: float
    c_theta: float


def _base_box(proposal) -> Box3D:
    return proposal.box if isinstance(proposal, Proposal) else proposal


def encode_target(proposal, gt: Box3D, objectness: int = 1) -> RegressionTarget:
    """Offsets ground truth minus proposal; heading as (sin, cos) of gt yaw."""
    b = _base_box(proposal)
    return RegressionTarget(
        objectness=objectness,
        dx=gt.cx - b.cx,
        dy=gt.cy - b.cy,
        dz=gt.cz - b.cz,
        dl=gt.l - b.l,
        dw=gt.w - b.w,
        dh=gt.h - b.h,
        s_theta=math.sin(gt.theta),
        c_theta=math.cos(gt.theta),
    )


def decode_target(proposal, target: RegressionTarget) -> Box3D:
    """Invert encode_target; heading recovered via atan2(s, c).

    Works for raw network outputs too (s, c need not be normalized),
    but decoded dimensions must come out positive.
    """
    b = _base_box(proposal)
    return Box3D(
        cx=b.cx + target.dx,
        cy=b.cy + target.dy,
        cz=b.cz + target.dz,
        l=b.l + target.dl,
        w=b.w + target.dw,
        h=b.h + target.dh,
        theta=normalize_angle(math.atan2(target.s_theta, target.c_theta)),
        class_id=b.class_id,
    )
