"""Range-binned BEV detection evaluation and dataset statistics.

Evaluation follows the KITTI devkit shape: greedy score-descending
one-to-one matching, difficulty filters with ignore semantics
(ground truths outside the filter, and neighboring classes, neither
count as false negatives nor let a detection become a true positive
or a false positive), interpolated average precision. On top of that
the corpus is sliced into range bins, half-open intervals of the BEV
distance from the sensor, and every metric is reported per bin:
detections and ground truths outside a bin are excluded from that
bin's evaluation, not penalized.

Precision/recall at the best F1 operating point uses its own matching
criterion, by default 3D euclidean center distance within 1 m, and
reports the mean 3D center error over the matched pairs.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

from ped3d.geometry import Box3D, bev_iou, points_in_box, velo_to_cam
from ped3d.kitti_io import Frame, LabelRecord, label_to_box

TARGET_CLASS = "Pedestrian"
NEIGHBOR_CLASSES = ("Person_sitting", "Cyclist")


@dataclass(frozen=True)
class RangeBins:
    """Half-open range intervals; the last edge opens an unbounded bin."""

    edges: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)

    def __post_init__(self):
        if len(self.edges) == 0:
            raise ValueError("need at least one bin edge")
        if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ValueError("bin edges must be strictly increasing")

    @property
    def labels(self) -> list[str]:
        out = []
        for lo, hi in zip(self.edges, self.edges[1:]):
            out.append(f"{lo:g}-{hi:g}")
        out.append(f"{self.edges[-1]:g}+")
        return out

    def intervals(self) -> list[tuple[str, float, float]]:
        los = list(self.edges)
        his = list(self.edges[1:]) + [math.inf]
        return [(lab, lo, hi) for lab, lo, hi in zip(self.labels, los, his)]

    def bin_index(self, range_m: float) -> int:
        """Index of the bin containing range_m, or -1 below the first edge."""
        return bisect_right(self.edges, range_m) - 1


@dataclass(frozen=True)
class MatchCriterion:
    """How a detection counts as correct: BEV IoU or 3D center distance."""

    mode: str = "bev_iou"
    threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("bev_iou", "euclidean_3d"):
            raise ValueError(f"unknown criterion mode {self.mode!r}")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        if self.mode == "bev_iou" and self.threshold > 1:
            raise ValueError("IoU threshold cannot exceed 1")

    def similarity(self, det: Box3D, gt: Box3D) -> float:
        """Bigger is better; distance enters negated."""
        if self.mode == "bev_iou":
            return bev_iou(det, gt)
        return -center_distance_3d(det, gt)

    @property
    def gate(self) -> float:
        return self.threshold if self.mode == "bev_iou" else -self.threshold


def center_distance_3d(a: Box3D, b: Box3D) -> float:
    dx, dy, dz = a.cx - b.cx, a.cy - b.cy, a.cz - b.cz
    return math.sqrt(dx * dx + dy * dy + dz * dz)


@dataclass(frozen=True)
class DifficultyFilter:
    """KITTI-style ground-truth filter on bbox height, occlusion, truncation."""

    name: str
    min_bbox_height: float
    max_occlusion: int
    max_truncation: float

    def passes(self, record: LabelRecord) -> bool:
        height = record.bbox[3] - record.bbox[1]
        return (
            height >= self.min_bbox_height
            and record.occluded <= self.max_occlusion
            and record.truncated <= self.max_truncation
        )


DIFFICULTY_PRESETS = {
    "easy": DifficultyFilter("easy", 40.0, 0, 0.15),
    "moderate": DifficultyFilter("moderate", 25.0, 1, 0.30),
    "hard": DifficultyFilter("hard", 25.0, 2, 0.50),
}


@dataclass(frozen=True)
class MatchResult:
    matches: list[tuple[int, int, float]]   # (det index, gt index, similarity)
    unmatched_dets: list[int]               # false positives
    unmatched_gts: list[int]                # false negatives (valid GTs only)
    ignored_dets: list[int]
    ignored_gts: list[int]
    n_valid_gt: int


def match_frame(
    dets: list[LabelRecord],
    gts: list[LabelRecord],
    criterion: MatchCriterion,
    difficulty: DifficultyFilter | None = None,
    target_class: str = TARGET_CLASS,
) -> MatchResult:
    """Greedy one-to-one matching in descending detection score.

    Each detection takes the best-similarity unmatched valid ground
    truth meeting the threshold. Failing that, a detection overlapping
    an ignored ground truth (wrong difficulty, or a neighboring class
    such as Person_sitting) is itself ignored; ignored ground truths
    are not consumed. Detections must carry scores.
    """
    det_idx = [i for i, d in enumerate(dets) if d.type == target_class]
    for i in det_idx:
        if dets[i].score is None:
            raise ValueError(f"detection {i} has no score")
    det_boxes = {i: label_to_box(dets[i]) for i in det_idx}

    valid, ignored = [], []
    for j, g in enumerate(gts):
        if g.type == target_class:
            if difficulty is None or difficulty.passes(g):
                valid.append(j)
            else:
                ignored.append(j)
        elif g.type in NEIGHBOR_CLASSES:
            ignored.append(j)
    gt_boxes = {j: label_to_box(gts[j]) for j in valid + ignored}

    order = sorted(det_idx, key=lambda i: (-dets[i].score, i))
    matches, fps, ignored_dets = [], [], []
    taken = set()
    for i in order:
        best_j, best_sim = -1, -math.inf
        for j in valid:
            if j in taken:
                continue
            sim = criterion.similarity(det_boxes[i], gt_boxes[j])
            if sim >= criterion.gate and sim > best_sim:
                best_j, best_sim = j, sim
        if best_j >= 0:
            taken.add(best_j)
            matches.append((i, best_j, best_sim))
            continue
        if any(
            criterion.similarity(det_boxes[i], gt_boxes[j]) >= criterion.gate for j in ignored
        ):
            ignored_dets.append(i)
        else:
            fps.append(i)
    fns = [j for j in valid if j not in taken]
    return MatchResult(matches, fps, fns, ignored_dets, ignored, len(valid))


@dataclass(frozen=True)
class DetectionOutcome:
    """One scored, non-ignored detection after matching."""

    frame_id: str
    det_index: int
    score: float
    is_tp: bool
    error_3d: float   # 3D center distance for TPs, nan for FPs


def collect_outcomes(
    frames,
    criterion: MatchCriterion,
    difficulty: DifficultyFilter | None = None,
) -> tuple[list[DetectionOutcome], int]:
    """Match every (frame_id, dets, gts) triple; returns outcomes + GT count."""
    outcomes = []
    n_gt = 0
    for frame_id, dets, gts in frames:
        result = match_frame(dets, gts, criterion, difficulty)
        n_gt += result.n_valid_gt
        for i, j, _ in result.matches:
            err = center_distance_3d(label_to_box(dets[i]), label_to_box(gts[j]))
            outcomes.append(DetectionOutcome(frame_id, i, dets[i].score, True, err))
        for i in result.unmatched_dets:
            outcomes.append(DetectionOutcome(frame_id, i, dets[i].score, False, math.nan))
    outcomes.sort(key=lambda o: (-o.score, o.frame_id, o.det_index))
    return outcomes, n_gt


@dataclass(frozen=True)
class PrCurve:
    """Precision/recall at each distinct score threshold, descending."""

    precisions: np.ndarray
    recalls: np.ndarray
    thresholds: np.ndarray


def pr_curve(outcomes: list[DetectionOutcome], n_gt: int) -> PrCurve:
    """Cumulative PR over score thresholds.

    Points sit at distinct scores only (operating points actually
    realizable by thresholding); ties are absorbed into one point.
    Empty when there are no detections or no ground truth.
    """
    empty = PrCurve(np.empty(0), np.empty(0), np.empty(0))
    if not outcomes or n_gt == 0:
        return empty
    precisions, recalls, thresholds = [], [], []
    tp = fp = 0
    for k, o in enumerate(outcomes):
        if o.is_tp:
            tp += 1
        else:
            fp += 1
        last_of_tie = k + 1 == len(outcomes) or outcomes[k + 1].score != o.score
        if last_of_tie:
            precisions.append(tp / (tp + fp))
            recalls.append(tp / n_gt)
            thresholds.append(o.score)
    return PrCurve(np.array(precisions), np.array(recalls), np.array(thresholds))


def average_precision(curve: PrCurve, n_points: int = 40) -> float:
    """Interpolated AP: mean over sampled recalls of the max precision
    at recall >= r.

    n_points=40 samples r in {1/40, ..., 1} (current KITTI devkit);
    n_points=11 samples r in {0, 0.1, ..., 1} (the legacy variant).
    """
    if len(curve.precisions) == 0:
        return 0.0
    if n_points == 11:
        samples = [k / 10.0 for k in range(11)]
    else:
        samples = [k / n_points for k in range(1, n_points + 1)]
    maxima = []
    for r in samples:
        reachable = curve.precisions[curve.recalls >= r]
        maxima.append(float(reachable.max()) if reachable.size else 0.0)
    return sum(maxima) / len(maxima)


@dataclass(frozen=True)
class BestF1Report:
    precision: float
    recall: float
    f1: float
    threshold: float
    mean_3d_error: float
    tp: int
    fp: int
    fn: int
    empty: bool = False


_EMPTY_F1 = BestF1Report(0.0, 0.0, 0.0, 0.0, 0.0, 0, 0, 0, empty=True)


def best_f1_from_outcomes(outcomes: list[DetectionOutcome], n_gt: int) -> BestF1Report:
    """Sweep score thresholds, keep the best F1 (ties: higher threshold)."""
    if not outcomes:
        return _EMPTY_F1
    best = None
    tp = fp = 0
    err_sum = 0.0
    best_err_mean = 0.0
    for k, o in enumerate(outcomes):
        if o.is_tp:
            tp += 1
            err_sum += o.error_3d
        else:
            fp += 1
        last_of_tie = k + 1 == len(outcomes) or outcomes[k + 1].score != o.score
        if not last_of_tie:
            continue
        precision = tp / (tp + fp)
        recall = tp / n_gt if n_gt else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        if best is None or f1 > best[0]:
            best = (f1, precision, recall, o.score, tp, fp)
            best_err_mean = err_sum / tp if tp else 0.0
    f1, precision, recall, threshold, tp, fp = best
    return BestF1Report(
        precision, recall, f1, threshold, best_err_mean, tp, fp, (n_gt - tp), empty=False
    )


def best_f1_report(
    frames,
    criterion: MatchCriterion = MatchCriterion("euclidean_3d", 1.0),
    difficulty: DifficultyFilter | None = None,
) -> BestF1Report:
    """Corpus-level best-F1 precision/recall with mean 3D center error."""
    outcomes, n_gt = collect_outcomes(frames, criterion, difficulty)
    return best_f1_from_outcomes(outcomes, n_gt)


def _label_range(record: LabelRecord) -> float:
    return math.hypot(record.location[0], record.location[2])


def _restrict(records, lo: float, hi: float):
    return [r for r in records if lo <= _label_range(r) < hi]


@dataclass(frozen=True)
class BinMetrics:
    label: str
    lo: float
    hi: float
    ap: float
    n_gt: int
    n_det: int
    best_f1: BestF1Report
    empty: bool   # no ground truth fell in this bin


@dataclass(frozen=True)
class EvalReport:
    """Per range-bin metrics for one difficulty, plus the unrestricted row."""

    difficulty: str
    ap_points: int
    criterion: MatchCriterion
    f1_criterion: MatchCriterion
    bins: dict[str, BinMetrics] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "difficulty": self.difficulty,
            "ap_points": self.ap_points,
            "criterion": {"mode": self.criterion.mode, "threshold": self.criterion.threshold},
            "f1_criterion": {
                "mode": self.f1_criterion.mode,
                "threshold": self.f1_criterion.threshold,
            },
            "bins": {
                label: {
                    "range": [m.lo, m.hi if math.isfinite(m.hi) else None],
                    "ap": m.ap,
                    "n_gt": m.n_gt,
                    "n_det": m.n_det,
                    "empty": m.empty,
                    "precision": m.best_f1.precision,
                    "recall": m.best_f1.recall,
                    "f1": m.best_f1.f1,
                    "f1_threshold": m.best_f1.threshold,
                    "mean_3d_error": m.best_f1.mean_3d_error,
                    "tp": m.best_f1.tp,
                    "fp": m.best_f1.fp,
                    "fn": m.best_f1.fn,
                }
                for label, m in self.bins.items()
            },
        }


def range_binned_map(
    frames,
    bins: RangeBins = RangeBins(),
    criterion: MatchCriterion = MatchCriterion("bev_iou", 0.5),
    difficulty: DifficultyFilter | None = None,
    ap_points: int = 40,
    f1_criterion: MatchCriterion = MatchCriterion("euclidean_3d", 1.0),
) -> EvalReport:
    """AP and best-F1 metrics per range bin plus an "all" row.

    For each bin both detections and ground truths are restricted to
    boxes whose BEV center range falls inside it before matching, so a
    detector is never penalized in a bin for detections elsewhere.
    """
    frames = list(frames)
    segments = [("all", 0.0, math.inf)] + bins.intervals()
    report_bins = {}
    for label, lo, hi in segments:
        sliced = [
            (fid, _restrict(dets, lo, hi), _restrict(gts, lo, hi)) for fid, dets, gts in frames
        ]
        outcomes, n_gt = collect_outcomes(sliced, criterion, difficulty)
        ap = average_precision(pr_curve(outcomes, n_gt), ap_points)
        f1_outcomes, f1_n_gt = collect_outcomes(sliced, f1_criterion, difficulty)
        n_det = sum(len(d) for _, d, _ in sliced)
        report_bins[label] = BinMetrics(
            label=label,
            lo=lo,
            hi=hi,
            ap=ap,
            n_gt=n_gt,
            n_det=n_det,
            best_f1=best_f1_from_outcomes(f1_outcomes, f1_n_gt),
            empty=n_gt == 0,
        )
    name = difficulty.name if difficulty is not None else "none"
    return EvalReport(name, ap_points, criterion, f1_criterion, report_bins)


CSV_COLUMNS = [
    "difficulty", "range_bin", "ap", "precision", "recall", "f1",
    "mean_3d_error", "tp", "fp", "fn", "n_gt", "n_det", "empty",
]


def report_csv_rows(reports: list[EvalReport]) -> list[dict]:
    rows = []
    for report in reports:
        for label, m in report.bins.items():
            rows.append(
                {
                    "difficulty": report.difficulty,
                    "range_bin": label,
                    "ap": m.ap,
                    "precision": m.best_f1.precision,
                    "recall": m.best_f1.recall,
                    "f1": m.best_f1.f1,
                    "mean_3d_error": m.best_f1.mean_3d_error,
                    "tp": m.best_f1.tp,
                    "fp": m.best_f1.fp,
                    "fn": m.best_f1.fn,
                    "n_gt": m.n_gt,
                    "n_det": m.n_det,
                    "empty": m.empty,
                }
            )
    return rows


# ---------------------------------------------------------------------------
# dataset statistics


@dataclass(frozen=True)
class BinStats:
    n_objects: int
    points_mean: float | None
    points_median: float | None
    points_p10: float | None
    points_p90: float | None
    n_with_pixels: int
    pixels_mean: float | None
    pixels_median: float | None


@dataclass(frozen=True)
class StatsReport:
    bins: dict[str, BinStats]

    def to_json_dict(self) -> dict:
        return {label: vars(s).copy() for label, s in self.bins.items()}


def _mask_bbox(instance, width: int) -> tuple[float, float, float, float]:
    pix = np.concatenate([np.arange(s, s + n) for s, n in instance.rle])
    us, vs = pix % width, pix // width
    return (float(us.min()), float(vs.min()), float(us.max() + 1), float(vs.max() + 1))


def _bbox_iou_2d(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def _associate_masks(frame: Frame, gt_indices: list[int]) -> dict[int, int]:
    """Greedy bbox-IoU association of mask instances to GT label indices."""
    if frame.masks is None or not frame.masks.instances:
        return {}
    pairs = []
    for m, inst in enumerate(frame.masks.instances):
        if inst.class_name != TARGET_CLASS:
            continue
        mb = _mask_bbox(inst, frame.masks.image_width)
        for j in gt_indices:
            iou = _bbox_iou_2d(mb, frame.labels[j].bbox)
            if iou > 0.1:
                pairs.append((iou, m, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    used_m, used_j, assoc = set(), set(), {}
    for _, m, j in pairs:
        if m in used_m or j in used_j:
            continue
        used_m.add(m)
        used_j.add(j)
        assoc[j] = m
    return assoc


def dataset_stats(
    frames: list[Frame],
    bins: RangeBins = RangeBins(),
    target_class: str = TARGET_CLASS,
) -> StatsReport:
    """Points-per-object and mask-pixels-per-object, bucketed by range.

    Point counts test oriented-box containment against the camera-frame
    cloud. Pixel counts need masks; mask instances are associated to
    labels by 2D bbox overlap and unmatched objects simply do not
    contribute pixel numbers.
    """
    n_bins = len(bins.edges)
    points_by_bin = [[] for _ in range(n_bins)]
    pixels_by_bin = [[] for _ in range(n_bins)]
    for frame in frames:
        if not frame.labels:
            continue
        gt_indices = [j for j, r in enumerate(frame.labels) if r.type == target_class]
        if not gt_indices:
            continue
        pts_cam = velo_to_cam(frame.cloud, frame.calib) if len(frame.cloud) else np.empty((0, 3))
        assoc = _associate_masks(frame, gt_indices)
        for j in gt_indices:
            record = frame.labels[j]
            box = label_to_box(record)
            b = bins.bin_index(_label_range(record))
            if b < 0:
                continue
            n_points = int(points_in_box(box, pts_cam).sum()) if len(pts_cam) else 0
            points_by_bin[b].append(n_points)
            if j in assoc:
                pixels_by_bin[b].append(frame.masks.instances[assoc[j]].pixel_count)

    out = {}
    for b, label in enumerate(bins.labels):
        pts = np.array(points_by_bin[b], dtype=np.float64)
        pix = np.array(pixels_by_bin[b], dtype=np.float64)
        out[label] = BinStats(
            n_objects=len(pts),
            points_mean=float(pts.mean()) if pts.size else None,
            points_median=float(np.median(pts)) if pts.size else None,
            points_p10=float(np.percentile(pts, 10)) if pts.size else None,
            points_p90=float(np.percentile(pts, 90)) if pts.size else None,
            n_with_pixels=len(pix),
            pixels_mean=float(pix.mean()) if pix.size else None,
            pixels_median=float(np.median(pix)) if pix.size else None,
        )
    return StatsReport(out)
