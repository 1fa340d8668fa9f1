"""Built-in oracle suites behind the ``selfcheck`` CLI subcommand.

Each check pits a fast-path implementation against an independent
slow one (Monte-Carlo areas, finite differences, exhaustive threshold
enumeration) on seeded random inputs. They are deliberately smaller
than the full test suite: a smoke screen for an installed package,
not a replacement for pytest.
"""

import math
from dataclasses import dataclass

import numpy as np

from ped3d.augment import AugmentConfig, decode_target, encode_target, ground
from ped3d.evaluation import (
    MatchCriterion,
    average_precision,
    collect_outcomes,
    pr_curve,
)
from ped3d.geometry import Box3D, bev_iou, bev_polygon, point_in_footprint
from ped3d.kitti_io import (
    box_to_label,
    label_to_box,
    parse_calib,
    parse_label_file,
    parse_masks,
    read_velodyne,
    write_calib,
    write_label_file,
    write_masks,
    write_velodyne,
)
from ped3d.loss import automated_focal_loss, heading_loss, smooth_l1
from ped3d.proposal import MeanBoxConfig, Proposal, assign_points_to_instances, propose_frame
from ped3d.synthetic import PedestrianSpec, SceneSpec, generate_synthetic_frame, synthetic_corpus


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _random_box(rng, span=20.0) -> Box3D:
    return Box3D(
        cx=float(rng.uniform(-span, span)),
        cy=float(rng.uniform(-1, 2)),
        cz=float(rng.uniform(5, span + 5)),
        l=float(rng.uniform(0.4, 2.5)),
        w=float(rng.uniform(0.4, 2.5)),
        h=float(rng.uniform(1.0, 2.0)),
        theta=float(rng.uniform(-math.pi, math.pi)),
    )


def monte_carlo_bev_iou(a: Box3D, b: Box3D, rng, grid: int = 1000) -> float:
    """Stratified Monte-Carlo IoU: one jittered sample per grid cell.

    Samples the tight bounding box of both footprints; checks plain
    point-in-rotated-rectangle containment, no polygon clipping, so
    this is an independent area oracle. grid=1000 is 10^6 samples.
    """
    corners = np.concatenate([bev_polygon(a), bev_polygon(b)])
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    base = (np.arange(grid) + 0.0)[None, :]
    xs = (base.T + rng.random((grid, grid))).ravel() * (hi[0] - lo[0]) / grid + lo[0]
    zs = (base + rng.random((grid, grid))).ravel() * (hi[1] - lo[1]) / grid + lo[1]
    in_a = point_in_footprint(a, xs, zs)
    in_b = point_in_footprint(b, xs, zs)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return np.count_nonzero(in_a & in_b) / union


def random_box_pair(rng):
    """A pair with correlated centers so overlaps actually occur."""
    a = _random_box(rng)
    b = _random_box(rng)
    b = Box3D(
        a.cx + float(rng.uniform(-2, 2)), b.cy, a.cz + float(rng.uniform(-2, 2)),
        b.l, b.w, b.h, theta=b.theta,
    )
    return a, b


def check_bev_iou(rng) -> CheckResult:
    worst = 0.0
    for _ in range(100):
        a, b = random_box_pair(rng)
        fast = bev_iou(a, b)
        if abs(bev_iou(b, a) - fast) > 1e-12:
            return CheckResult("bev_iou", False, "asymmetric result")
        if abs(bev_iou(a, a) - 1.0) > 1e-9:
            return CheckResult("bev_iou", False, "self IoU != 1")
        worst = max(worst, abs(fast - monte_carlo_bev_iou(a, b, rng, grid=300)))
    ok = worst < 5e-3
    return CheckResult("bev_iou", ok, f"max |clip - monte carlo| = {worst:.2e}")


def check_proposals(rng) -> CheckResult:
    mean_box = MeanBoxConfig()
    counts = []
    for frame in synthetic_corpus(20, seed=int(rng.integers(2**31))):
        assigned = {iid for _, iid in assign_points_to_instances(frame)}
        survivors = propose_frame(frame, mean_box)
        per_inst = {}
        for p in survivors:
            per_inst[p.instance_id] = per_inst.get(p.instance_id, 0) + 1
        if not assigned <= set(per_inst):
            return CheckResult("proposals", False, "instance lost all proposals")
        counts.extend(per_inst.values())
    in_band = sum(1 <= c <= 5 for c in counts)
    ok = bool(counts) and in_band / len(counts) >= 0.95
    return CheckResult(
        "proposals", ok, f"{in_band}/{len(counts)} instances with 1-5 survivors"
    )


def _ground_plane_cloud(ground_y: float, rng, n: int = 2000) -> np.ndarray:
    """Dense camera-frame ground patch plus a few pole points above it."""
    xs = rng.uniform(-4.0, 8.0, n)
    zs = rng.uniform(24.0, 36.0, n)
    plane = np.stack([xs, np.full(n, ground_y), zs], axis=1)
    poles = np.array([[2.0, ground_y - 3.0, 30.0], [2.2, ground_y - 2.5, 29.5]])
    return np.concatenate([plane, poles])


def check_grounding(rng) -> CheckResult:
    cfg = AugmentConfig()
    ground_y = 1.65
    cloud = _ground_plane_cloud(ground_y, rng)
    for _ in range(20):
        lift = float(rng.uniform(0.1, 0.6))
        box = Box3D(
            2.0 + float(rng.uniform(-1, 1)), ground_y - 0.88 - lift,
            30.0 + float(rng.uniform(-1, 1)), 0.84, 0.66, 1.76,
        )
        prop = Proposal(box, 1, 1, 0)
        g = ground(prop, cloud, cfg)
        bottom = g.box.cy + 0.5 * g.box.h
        if abs(bottom - ground_y) > 1e-6:
            return CheckResult("grounding", False, f"bottom off plane by {bottom - ground_y:.2e}")
        g2 = ground(g, cloud, cfg)
        if abs(g2.box.cy - g.box.cy) > 1e-12:
            return CheckResult("grounding", False, "not idempotent")
    return CheckResult("grounding", True, "bottoms on plane, idempotent, tops unused")


def check_target_codec(rng) -> CheckResult:
    worst = 0.0
    for _ in range(1000):
        prop, gt = _random_box(rng), _random_box(rng)
        dec = decode_target(prop, encode_target(prop, gt))
        worst = max(
            worst,
            abs(dec.cx - gt.cx), abs(dec.cy - gt.cy), abs(dec.cz - gt.cz),
            abs(dec.l - gt.l), abs(dec.w - gt.w), abs(dec.h - gt.h),
            abs(dec.theta - gt.theta),
        )
    return CheckResult("target_codec", worst < 1e-9, f"max round-trip error {worst:.2e}")


def _fd(fn, x, step=1e-5):
    return (fn(x + step) - fn(x - step)) / (2 * step)


def check_loss_gradients(rng) -> CheckResult:
    worst = 0.0
    for _ in range(200):
        p = float(rng.uniform(0.02, 0.98))
        ph = float(rng.uniform(0.02, 1.0))
        _, grad = automated_focal_loss(p, ph)
        num = _fd(lambda x: automated_focal_loss(x, ph)[0], p)
        worst = max(worst, abs(grad - num) / max(abs(num), 1e-8))

        r = float(rng.uniform(-3, 3))
        if abs(abs(r) - 1.0) < 1e-3:
            r += 0.01
        _, grad = smooth_l1(r)
        num = _fd(lambda x: smooth_l1(x)[0], r)
        worst = max(worst, abs(grad - num) / max(abs(num), 1e-8))

        s, c, th = float(rng.uniform(-1, 1)), float(rng.uniform(-1, 1)), float(rng.uniform(-3, 3))
        if abs(abs(s - math.sin(th)) - 1) < 1e-3 or abs(abs(c - math.cos(th)) - 1) < 1e-3:
            continue
        _, (gs, gc) = heading_loss(s, c, th)
        num_s = _fd(lambda x: heading_loss(x, c, th)[0], s)
        num_c = _fd(lambda x: heading_loss(s, x, th)[0], c)
        worst = max(worst, abs(gs - num_s) / max(abs(num_s), 1e-8))
        worst = max(worst, abs(gc - num_c) / max(abs(num_c), 1e-8))
    return CheckResult("loss_gradients", worst < 1e-4, f"max relative error {worst:.2e}")


def _tiny_eval_oracle(frames, criterion, n_points=40):
    """Exhaustive threshold enumeration with from-scratch greedy matching."""

    def match_counts(min_score):
        tp = fp = n_gt = 0
        for _, dets, gts in frames:
            gt_boxes = [label_to_box(g) for g in gts]
            n_gt += len(gts)
            taken = [False] * len(gts)
            order = sorted(
                (i for i, d in enumerate(dets) if d.score >= min_score),
                key=lambda i: (-dets[i].score, i),
            )
            for i in order:
                db = label_to_box(dets[i])
                best, best_sim = -1, -math.inf
                for j, gb in enumerate(gt_boxes):
                    if taken[j]:
                        continue
                    sim = criterion.similarity(db, gb)
                    if sim >= criterion.gate and sim > best_sim:
                        best, best_sim = j, sim
                if best >= 0:
                    taken[best] = True
                    tp += 1
                else:
                    fp += 1
        return tp, fp, n_gt

    scores = sorted({d.score for _, dets, _ in frames for d in dets}, reverse=True)
    pr = []
    for s in scores:
        tp, fp, n_gt = match_counts(s)
        if n_gt == 0:
            return 0.0
        pr.append((tp / (tp + fp), tp / n_gt))
    if not pr:
        return 0.0
    samples = [k / n_points for k in range(1, n_points + 1)]
    maxima = []
    for r in samples:
        good = [p for p, rec in pr if rec >= r]
        maxima.append(max(good) if good else 0.0)
    return sum(maxima) / len(maxima)


def _random_scenarios(rng, n):
    scenarios = []
    for s in range(n):
        gts, dets = [], []
        for _ in range(int(rng.integers(0, 4))):
            gts.append(box_to_label(_random_box(rng), bbox=(0, 0, 60, 160)))
        for _ in range(int(rng.integers(0, 6))):
            base = _random_box(rng)
            if gts and rng.random() < 0.6:
                g = gts[int(rng.integers(len(gts)))]
                base = Box3D(
                    g.location[0] + float(rng.uniform(-1.5, 1.5)),
                    g.location[1] - 0.88,
                    g.location[2] + float(rng.uniform(-1.5, 1.5)),
                    base.l, base.w, base.h, theta=base.theta,
                )
            dets.append(
                box_to_label(base, bbox=(0, 0, 60, 160), score=float(rng.uniform(0, 1)))
            )
        scenarios.append((f"{s:04d}", dets, gts))
    return scenarios


def check_ap_oracle(rng) -> CheckResult:
    criterion = MatchCriterion("euclidean_3d", 1.0)
    frames = _random_scenarios(rng, 60)
    outcomes, n_gt = collect_outcomes(frames, criterion)
    fast = average_precision(pr_curve(outcomes, n_gt), 40)
    slow = _tiny_eval_oracle(frames, criterion, 40)
    return CheckResult("ap_oracle", fast == slow, f"fast {fast:.6f} vs oracle {slow:.6f}")


def check_io_roundtrip(rng) -> CheckResult:
    frame = generate_synthetic_frame(
        SceneSpec(pedestrians=(PedestrianSpec(0.0, 25.0),), clutter_points=100),
        seed=int(rng.integers(2**31)),
    )
    if not np.array_equal(read_velodyne(write_velodyne(frame.cloud)), frame.cloud):
        return CheckResult("io_roundtrip", False, "velodyne")
    # labels stabilize after one 2-decimal serialization
    once = parse_label_file(write_label_file(frame.labels))
    if parse_label_file(write_label_file(once)) != once:
        return CheckResult("io_roundtrip", False, "labels")
    if parse_masks(write_masks(frame.masks)) != frame.masks:
        return CheckResult("io_roundtrip", False, "masks")
    back = parse_calib(
        write_calib(frame.calib),
        image_size=(frame.calib.image_width, frame.calib.image_height),
    )
    if not (
        np.array_equal(back.P2, frame.calib.P2)
        and np.array_equal(back.R0_rect, frame.calib.R0_rect)
        and np.array_equal(back.Tr_velo_to_cam, frame.calib.Tr_velo_to_cam)
    ):
        return CheckResult("io_roundtrip", False, "calib")
    return CheckResult("io_roundtrip", True, "labels, calib, velodyne, masks all lossless")


def run_all(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return [
        check_bev_iou(rng),
        check_proposals(rng),
        check_grounding(rng),
        check_target_codec(rng),
        check_loss_gradients(rng),
        check_ap_oracle(rng),
        check_io_roundtrip(rng),
    ]
