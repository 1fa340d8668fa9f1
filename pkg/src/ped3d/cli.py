"""Batch front end: propose, augment, evaluate, stats, selfcheck.

Stages communicate through files (JSON-lines proposals, KITTI label
text, JSON/CSV reports) so an external refinement trainer can sit in
the middle of the pipeline. Runs are deterministic for a fixed seed,
independent of the worker count.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

import argparse
import csv
import io
import json
import sys
import zlib
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from ped3d.augment import (
    AugmentConfig,
    POSITIVE,
    classify_against_gt,
    combined,
    encode_target,
    ground,
    random_displace,
)
from ped3d.evaluation import (
    CSV_COLUMNS,
    DIFFICULTY_PRESETS,
    MatchCriterion,
    RangeBins,
    dataset_stats,
    range_binned_map,
    report_csv_rows,
)
from ped3d.geometry import bev_iou, velo_to_cam
from ped3d.kitti_io import (
    DEFAULT_IMAGE_SIZE,
    frame_paths,
    label_to_box,
    load_frame,
    parse_label_file,
)
from ped3d.proposal import MeanBoxConfig, dump_proposals, load_proposals, propose_frame
from ped3d.selfcheck import run_all

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

TARGET_CLASS = "Pedestrian"
AUGMENT_MODES = ("random", "grounding", "combined")


@dataclass
class PipelineConfig:
    dataset_root: str = "."
    split: str | None = None
    out_dir: str = "out"
    seed: int = 0
    jobs: int = 1
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE
    mean_box: MeanBoxConfig = field(default_factory=MeanBoxConfig)
    nms_iou: float = 0.5
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    grid_extent: tuple[float, float, float] = (4.0, 3.0, 4.0)
    range_edges: tuple[float, ...] = (0.0, 10.0, 20.0, 30.0)
    iou_threshold: float = 0.5
    euclidean_threshold: float = 1.0
    ap_points: int = 40
    difficulties: tuple[str, ...] = ("easy", "moderate", "hard")

    @property
    def bins(self) -> RangeBins:
        return RangeBins(tuple(self.range_edges))


def build_config(args) -> PipelineConfig:
    data = {}
    if args.config:
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh)
    eval_cfg = data.get("eval", {})
    cfg = PipelineConfig(
        dataset_root=args.root or data.get("dataset_root", "."),
        split=args.split or data.get("split"),
        out_dir=args.out or data.get("out_dir", "out"),
        seed=args.seed if args.seed is not None else int(data.get("seed", 0)),
        jobs=args.jobs if args.jobs is not None else int(data.get("jobs", 1)),
        image_size=tuple(data.get("image_size", DEFAULT_IMAGE_SIZE)),
        mean_box=MeanBoxConfig(**data.get("mean_box", {})),
        nms_iou=float(data.get("nms", {}).get("iou_threshold", 0.5)),
        augment=AugmentConfig(**data.get("augment", {})),
        grid_extent=tuple(data.get("voxel", {}).get("grid_extent", (4.0, 3.0, 4.0))),
        range_edges=tuple(eval_cfg.get("range_edges", (0.0, 10.0, 20.0, 30.0))),
        iou_threshold=float(eval_cfg.get("iou_threshold", 0.5)),
        euclidean_threshold=float(eval_cfg.get("euclidean_threshold", 1.0)),
        ap_points=int(eval_cfg.get("ap_points", 40)),
        difficulties=tuple(eval_cfg.get("difficulties", ("easy", "moderate", "hard"))),
    )
    if cfg.jobs < 1:
        raise ValueError("jobs must be >= 1")
    for d in cfg.difficulties:
        if d not in DIFFICULTY_PRESETS:
            raise ValueError(f"unknown difficulty {d!r}")
    return cfg


def read_split(cfg: PipelineConfig) -> list[str]:
    if cfg.split is not None:
        path = Path(cfg.split)
        if not path.exists():
            raise FileNotFoundError(f"split file not found: {path}")
        return [line.strip() for line in path.read_text().splitlines() if line.strip()]
    velo_dir = Path(cfg.dataset_root) / "velodyne"
    if not velo_dir.is_dir():
        raise FileNotFoundError(f"no split file given and no directory {velo_dir}")
    return sorted(p.stem for p in velo_dir.glob("*.bin"))


def _map_frames(worker, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [worker(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, items))


def _derived_seed(global_seed: int, frame_id: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([global_seed, zlib.crc32(frame_id.encode()), index])


# ---------------------------------------------------------------------------
# propose


def _propose_one(item):
    cfg, frame_id = item
    try:
        frame = load_frame(cfg.dataset_root, frame_id, want_masks=True, image_size=cfg.image_size)
        proposals = propose_frame(frame, cfg.mean_box, cfg.nms_iou)
        out = Path(cfg.out_dir) / "proposals" / f"{frame_id}.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(dump_proposals(proposals, frame_id))
        survivors = Counter(p.instance_id for p in proposals)
        return frame_id, sorted(survivors.values()), None
    except Exception as e:  # per-frame isolation: report, keep going
        return frame_id, None, f"frame {frame_id}: {e}"


def cmd_propose(cfg: PipelineConfig) -> int:
    frame_ids = read_split(cfg)
    results = _map_frames(_propose_one, [(cfg, fid) for fid in frame_ids], cfg.jobs)
    histogram = Counter()
    failures = []
    n_proposals = 0
    for frame_id, survivor_counts, error in results:
        if error is not None:
            failures.append(error)
            continue
        histogram.update(survivor_counts)
        n_proposals += sum(survivor_counts)
    summary = {
        "frames_processed": len(frame_ids) - len(failures),
        "frames_failed": failures,
        "proposals_total": n_proposals,
        "survivors_per_instance_histogram": {
            str(k): histogram[k] for k in sorted(histogram)
        },
    }
    out = Path(cfg.out_dir) / "proposals"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    for msg in failures:
        print(msg, file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


# ---------------------------------------------------------------------------
# augment


def _augment_one(item):
    cfg, frame_id, mode = item
    try:
        in_path = Path(cfg.out_dir) / "proposals" / f"{frame_id}.jsonl"
        if not in_path.exists():
            raise FileNotFoundError(f"missing proposals file {in_path}")
        proposals = [p for _, p in load_proposals(in_path.read_text())]
        frame = load_frame(cfg.dataset_root, frame_id, want_labels=True, image_size=cfg.image_size)
        gts = [label_to_box(r) for r in frame.labels if r.type == TARGET_CLASS]
        pts_cam = velo_to_cam(frame.cloud, frame.calib)

        records = []
        for index, prop in enumerate(proposals):
            seed = _derived_seed(cfg.seed, frame_id, index)
            if mode == "random":
                pairs = random_displace(prop, gts, cfg.augment, seed)
            elif mode == "grounding":
                g = ground(prop, pts_cam, cfg.augment)
                pairs = [(g, classify_against_gt(g.box, gts, cfg.augment))]
            else:
                pairs = combined(prop, pts_cam, gts, cfg.augment, seed)
            for aug, label in pairs:
                b = aug.box
                record = {
                    "frame_id": frame_id,
                    "instance_id": aug.instance_id,
                    "inlier_count": aug.inlier_count,
                    "box": {
                        "cx": b.cx, "cy": b.cy, "cz": b.cz,
                        "l": b.l, "w": b.w, "h": b.h, "theta": b.theta,
                    },
                    "label": label,
                    "objectness": 1 if label == POSITIVE else 0,
                    "target": None,
                }
                if label == POSITIVE and gts:
                    best = max(gts, key=lambda g: bev_iou(b, g))
                    t = encode_target(aug, best)
                    record["target"] = {
                        "dx": t.dx, "dy": t.dy, "dz": t.dz,
                        "dl": t.dl, "dw": t.dw, "dh": t.dh,
                        "s_theta": t.s_theta, "c_theta": t.c_theta,
                    }
                records.append(record)
        out = Path(cfg.out_dir) / "augmented" / f"{frame_id}.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("".join(json.dumps(r) + "\n" for r in records))
        label_counts = Counter(r["label"] for r in records)
        return frame_id, dict(label_counts), None
    except Exception as e:
        return frame_id, None, f"frame {frame_id}: {e}"


def cmd_augment(cfg: PipelineConfig, mode: str) -> int:
    frame_ids = read_split(cfg)
    results = _map_frames(_augment_one, [(cfg, fid, mode) for fid in frame_ids], cfg.jobs)
    failures = []
    label_totals = Counter()
    for frame_id, counts, error in results:
        if error is not None:
            failures.append(error)
        else:
            label_totals.update(counts)
    summary = {
        "mode": mode,
        "frames_processed": len(frame_ids) - len(failures),
        "frames_failed": failures,
        "labels": {k: label_totals[k] for k in sorted(label_totals)},
    }
    out = Path(cfg.out_dir) / "augmented"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    for msg in failures:
        print(msg, file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(cfg: PipelineConfig, predictions_dir: str) -> int:
    frame_ids = read_split(cfg)
    pred_root = Path(predictions_dir)
    frames = []
    warnings = []
    for frame_id in frame_ids:
        gt_path = frame_paths(cfg.dataset_root, frame_id)["label"]
        pred_path = pred_root / f"{frame_id}.txt"
        if not gt_path.exists() or not pred_path.exists():
            missing = "ground truth" if not gt_path.exists() else "prediction"
            warnings.append(f"frame {frame_id}: missing {missing} file, skipped")
            continue
        gts = parse_label_file(gt_path.read_text())
        dets = parse_label_file(pred_path.read_text())
        frames.append((frame_id, dets, gts))

    criterion = MatchCriterion("bev_iou", cfg.iou_threshold)
    f1_criterion = MatchCriterion("euclidean_3d", cfg.euclidean_threshold)
    reports = [
        range_binned_map(
            frames,
            bins=cfg.bins,
            criterion=criterion,
            difficulty=DIFFICULTY_PRESETS[name],
            ap_points=cfg.ap_points,
            f1_criterion=f1_criterion,
        )
        for name in cfg.difficulties
    ]

    out = Path(cfg.out_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "frames_evaluated": len(frames),
        "warnings": warnings,
        "warning_count": len(warnings),
        "reports": {r.difficulty: r.to_json_dict() for r in reports},
    }
    (out / "report.json").write_text(json.dumps(doc, indent=1))

    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
    writer.writeheader()
    for row in report_csv_rows(reports):
        writer.writerow(row)
    (out / "report.csv").write_text(buf.getvalue())
    for msg in warnings:
        print(msg, file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def cmd_stats(cfg: PipelineConfig) -> int:
    frame_ids = read_split(cfg)
    frames = []
    failures = []
    for frame_id in frame_ids:
        try:
            has_masks = frame_paths(cfg.dataset_root, frame_id)["masks"].exists()
            frames.append(
                load_frame(
                    cfg.dataset_root, frame_id,
                    want_masks=has_masks, want_labels=True, image_size=cfg.image_size,
                )
            )
        except Exception as e:
            failures.append(f"frame {frame_id}: {e}")
    report = dataset_stats(frames, bins=cfg.bins)

    out = Path(cfg.out_dir) / "stats"
    out.mkdir(parents=True, exist_ok=True)
    doc = {"frames_failed": failures, "bins": report.to_json_dict()}
    (out / "stats.json").write_text(json.dumps(doc, indent=1))

    buf = io.StringIO()
    columns = [
        "range_bin", "n_objects", "points_mean", "points_median",
        "points_p10", "points_p90", "n_with_pixels", "pixels_mean", "pixels_median",
    ]
    writer = csv.DictWriter(buf, fieldnames=columns)
    writer.writeheader()
    for label, stats in report.bins.items():
        row = {"range_bin": label}
        row.update({k: getattr(stats, k) for k in columns[1:]})
        writer.writerow(row)
    (out / "stats.csv").write_text(buf.getvalue())
    for msg in failures:
        print(msg, file=sys.stderr)
    return EXIT_DATA if failures else EXIT_OK


def cmd_selfcheck(seed: int) -> int:
    results = run_all(seed)
    for r in results:
        print(f"[{'ok' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_DATA


# ---------------------------------------------------------------------------
# argument plumbing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ped3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_common(p):
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--root", help="dataset root directory")
        p.add_argument("--split", help="file listing frame ids, one per line")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--jobs", type=int, help="worker processes")
        p.add_argument("--out", help="output directory")

    add_common(sub.add_parser("propose", help="generate proposals from masks + clouds"))
    p_aug = sub.add_parser("augment", help="augment proposals for training")
    add_common(p_aug)
    p_aug.add_argument("--mode", required=True, choices=AUGMENT_MODES)
    p_eval = sub.add_parser("evaluate", help="range-binned evaluation of predictions")
    add_common(p_eval)
    p_eval.add_argument("--predictions", required=True, help="directory of KITTI prediction files")
    add_common(sub.add_parser("stats", help="dataset points/pixels statistics"))
    p_check = sub.add_parser("selfcheck", help="run built-in oracle suites")
    p_check.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    if args.command == "selfcheck":
        return cmd_selfcheck(args.seed or 0)

    try:
        cfg = build_config(args)
    except (OSError, ValueError, TypeError, tomllib.TOMLDecodeError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE

    try:
        if args.command == "propose":
            return cmd_propose(cfg)
        if args.command == "augment":
            return cmd_augment(cfg, args.mode)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.predictions)
        if args.command == "stats":
            return cmd_stats(cfg)
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
