"""Readers and writers for KITTI-format data plus a JSON mask format.

Covers label files (15 or 16 whitespace-separated fields), calibration
files (``key: floats`` lines), raw velodyne scans (little-endian
float32 x, y, z, reflectance quadruples, no header) and per-image
instance masks as JSON with row-major run-length encoding:

    {"image_width": W, "image_height": H,
     "instances": [{"instance_id": 1, "class": "Pedestrian",
                    "score": 0.9, "rle": [[start, length], ...]}, ...]}

Parsing is strict and locale-independent; write/parse round-trips are
lossless. KITTI's -1 sentinels (DontCare rows) are preserved verbatim.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ped3d.geometry import Box3D, Calibration, normalize_angle, project_cam

VELODYNE_DIR = "velodyne"
CALIB_DIR = "calib"
LABEL_DIR = "label_2"
MASK_DIR = "masks"

# image size used when a calib file (which carries none) comes without
# an explicit one; the common KITTI camera-2 resolution
DEFAULT_IMAGE_SIZE = (1242, 375)


class FormatError(ValueError):
    """A file does not conform to its declared format."""


@dataclass(frozen=True)
class LabelRecord:
    """One KITTI label line. Locations are bottom-face centers, camera frame."""

    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]   # left, top, right, bottom (px)
    dims: tuple[float, float, float]          # h, w, l (m)
    location: tuple[float, float, float]      # x, y, z (m)
    rotation_y: float
    score: float | None = None


_LABEL_FIELDS = (
    "type", "truncated", "occluded", "alpha",
    "bbox_left", "bbox_top", "bbox_right", "bbox_bottom",
    "height", "width", "length", "x", "y", "z", "rotation_y", "score",
)


def parse_label_file(text: str) -> list[LabelRecord]:
    """Parse KITTI label text into records; raises FormatError on bad lines."""
    records = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) not in (15, 16):
            raise FormatError(f"line {line_no}: expected 15 or 16 fields, got {len(tokens)}")
        vals = [tokens[0]]
        for i, tok in enumerate(tokens[1:], start=1):
            try:
                vals.append(float(tok))
            except ValueError:
                raise FormatError(
                    f"line {line_no}: field '{_LABEL_FIELDS[i]}' is not a number: {tok!r}"
                ) from None
        bbox = tuple(vals[4:8])
        if not (bbox[2] > bbox[0] and bbox[3] > bbox[1]):
            raise FormatError(f"line {line_no}: field 'bbox_right/bbox_bottom' not ordered: {bbox}")
        records.append(
            LabelRecord(
                type=vals[0],
                truncated=vals[1],
                occluded=int(vals[2]),
                alpha=vals[3],
                bbox=bbox,
                dims=tuple(vals[8:11]),
                location=tuple(vals[11:14]),
                rotation_y=vals[14],
                score=vals[15] if len(vals) == 16 else None,
            )
        )
    return records


def write_label_file(records) -> str:
    """Serialize records in KITTI convention: 2-decimal floats, full-precision score."""
    lines = []
    for r in records:
        parts = [
            r.type,
            f"{r.truncated:.2f}",
            f"{r.occluded:d}",
            f"{r.alpha:.2f}",
            *(f"{v:.2f}" for v in r.bbox),
            *(f"{v:.2f}" for v in r.dims),
            *(f"{v:.2f}" for v in r.location),
            f"{r.rotation_y:.2f}",
        ]
        if r.score is not None:
            parts.append(repr(float(r.score)))
        lines.append(" ".join(parts))
    return "".join(line + "\n" for line in lines)


def read_velodyne(data: bytes) -> np.ndarray:
    """Decode a raw scan into an (N, 4) float32 array (velodyne frame)."""
    if len(data) % 16 != 0:
        raise FormatError(f"velodyne byte length {len(data)} not divisible by 16")
    return np.frombuffer(data, dtype="<f4").reshape(-1, 4).copy()


def write_velodyne(cloud) -> bytes:
    return np.ascontiguousarray(cloud, dtype="<f4").tobytes()


def parse_calib(text: str, image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE) -> Calibration:
    """Parse a KITTI calibration file.

    KITTI calib files carry no image dimensions, so ``image_size``
    supplies them (width, height). Unknown keys are ignored.
    """
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if not key:
            continue
        try:
            values[key] = [float(t) for t in rest.split()]
        except ValueError:
            raise FormatError(f"line {line_no}: malformed float in key {key!r}") from None
    needed = {"P2": 12, "R0_rect": 9, "Tr_velo_to_cam": 12}
    for key, arity in needed.items():
        if key not in values:
            raise FormatError(f"missing calibration key {key!r}")
        if len(values[key]) != arity:
            raise FormatError(
                f"key {key!r} has {len(values[key])} values, expected {arity}"
            )
    return Calibration(
        P2=np.array(values["P2"]).reshape(3, 4),
        R0_rect=np.array(values["R0_rect"]).reshape(3, 3),
        Tr_velo_to_cam=np.array(values["Tr_velo_to_cam"]).reshape(3, 4),
        image_width=image_size[0],
        image_height=image_size[1],
    )


def write_calib(calib: Calibration) -> str:
    def row(mat):
        return " ".join(repr(float(v)) for v in np.asarray(mat).ravel())

    return (
        f"P2: {row(calib.P2)}\n"
        f"R0_rect: {row(calib.R0_rect)}\n"
        f"Tr_velo_to_cam: {row(calib.Tr_velo_to_cam)}\n"
    )


@dataclass(frozen=True)
class MaskInstance:
    instance_id: int
    class_name: str
    score: float
    rle: tuple[tuple[int, int], ...]   # (start, run_length) in row-major pixel order

    @property
    def pixel_count(self) -> int:
        return sum(length for _, length in self.rle)


@dataclass(frozen=True)
class InstanceMaskSet:
    image_width: int
    image_height: int
    instances: tuple[MaskInstance, ...] = ()


def _validate_masks(masks: InstanceMaskSet) -> None:
    total = masks.image_width * masks.image_height
    claimed = np.zeros(total, dtype=bool)
    seen_ids = set()
    for inst in masks.instances:
        if inst.instance_id < 0:
            raise FormatError(f"instance_id {inst.instance_id} must be non-negative")
        if inst.instance_id in seen_ids:
            raise FormatError(f"duplicate instance_id {inst.instance_id}")
        seen_ids.add(inst.instance_id)
        prev_end = 0
        for start, length in inst.rle:
            if length < 1 or start < 0 or start + length > total:
                raise FormatError(
                    f"instance {inst.instance_id}: run ({start}, {length}) outside image"
                )
            if start < prev_end:
                raise FormatError(
                    f"instance {inst.instance_id}: runs unsorted or overlapping at {start}"
                )
            prev_end = start + length
            seg = claimed[start:start + length]
            if seg.any():
                raise FormatError(
                    f"instance {inst.instance_id}: overlaps another instance at run ({start}, {length})"
                )
            seg[:] = True


def parse_masks(json_text: str) -> InstanceMaskSet:
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as e:
        raise FormatError(f"mask JSON: {e}") from None
    try:
        instances = tuple(
            MaskInstance(
                instance_id=int(inst["instance_id"]),
                class_name=str(inst["class"]),
                score=float(inst["score"]),
                rle=tuple((int(s), int(n)) for s, n in inst["rle"]),
            )
            for inst in doc["instances"]
        )
        masks = InstanceMaskSet(int(doc["image_width"]), int(doc["image_height"]), instances)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"mask JSON schema: {e}") from None
    _validate_masks(masks)
    return masks


def write_masks(masks: InstanceMaskSet) -> str:
    doc = {
        "image_width": masks.image_width,
        "image_height": masks.image_height,
        "instances": [
            {
                "instance_id": inst.instance_id,
                "class": inst.class_name,
                "score": inst.score,
                "rle": [[s, n] for s, n in inst.rle],
            }
            for inst in masks.instances
        ],
    }
    return json.dumps(doc, indent=1)


def decode_id_map(masks: InstanceMaskSet) -> np.ndarray:
    """Rasterize to an (H, W) int32 map of instance ids, -1 for background.

    If instances overlap (possible only for sets built programmatically,
    parse rejects them), the first-listed instance wins.
    """
    flat = np.full(masks.image_width * masks.image_height, -1, dtype=np.int32)
    for inst in reversed(masks.instances):
        for start, length in inst.rle:
            flat[start:start + length] = inst.instance_id
    return flat.reshape(masks.image_height, masks.image_width)


def decode_pixel(masks: InstanceMaskSet, u: int, v: int) -> int | None:
    """Instance id covering pixel (u, v), or None for background."""
    if not (0 <= u < masks.image_width and 0 <= v < masks.image_height):
        return None
    pos = v * masks.image_width + u
    for inst in masks.instances:
        for start, length in inst.rle:
            if start <= pos < start + length:
                return inst.instance_id
            if start > pos:
                break
    return None


def encode_mask_pixels(pixel_indices) -> tuple[tuple[int, int], ...]:
    """RLE-encode sorted row-major pixel indices into (start, length) runs."""
    idx = np.unique(np.asarray(pixel_indices, dtype=np.int64))
    if idx.size == 0:
        return ()
    breaks = np.nonzero(np.diff(idx) > 1)[0]
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return tuple((int(idx[s]), int(idx[e] - idx[s] + 1)) for s, e in zip(starts, ends))


@dataclass
class Frame:
    """One sensor frame: cloud + calib, optionally masks and labels."""

    frame_id: str
    cloud: np.ndarray            # (N, 4) float32, velodyne frame
    calib: Calibration
    masks: InstanceMaskSet | None = None
    labels: list[LabelRecord] | None = None

    def __post_init__(self):
        if self.masks is not None:
            if (self.masks.image_width, self.masks.image_height) != (
                self.calib.image_width,
                self.calib.image_height,
            ):
                raise ValueError(
                    f"frame {self.frame_id}: mask dims "
                    f"{self.masks.image_width}x{self.masks.image_height} do not match calib "
                    f"{self.calib.image_width}x{self.calib.image_height}"
                )


def label_to_box(record: LabelRecord) -> Box3D:
    """Convert a label to a Box3D (bottom-face center -> volumetric center)."""
    h, w, l = record.dims
    x, y, z = record.location
    return Box3D(
        cx=x, cy=y - 0.5 * h, cz=z, l=l, w=w, h=h,
        theta=record.rotation_y,
        class_id=record.type,
        score=record.score if record.score is not None else 1.0,
    )


def box_to_label(
    box: Box3D,
    calib: Calibration | None = None,
    bbox: tuple[float, float, float, float] | None = None,
    truncated: float = 0.0,
    occluded: int = 0,
    score: float | None = None,
) -> LabelRecord:
    """Convert a Box3D back to a label record.

    The 2D bbox comes either explicitly or from projecting the box
    corners with ``calib`` (clamped to the image); one of the two must
    be given. ``score=None`` writes a 15-field ground-truth style
    record; pass ``box.score`` explicitly for prediction records.
    """
    if bbox is None:
        if calib is None:
            raise ValueError("box_to_label needs either an explicit bbox or a calib")
        from ped3d.geometry import box_corners_3d  # local import to avoid cycle noise

        corners = box_corners_3d(box)
        front = corners[:, 2] > 1e-6
        if not front.any():
            raise ValueError("box is fully behind the camera")
        u, v, _ = project_cam(corners[front], calib.P2)
        left = float(np.clip(u.min(), 0, calib.image_width - 1))
        right = float(np.clip(u.max(), left + 1e-3, calib.image_width))
        top = float(np.clip(v.min(), 0, calib.image_height - 1))
        bottom = float(np.clip(v.max(), top + 1e-3, calib.image_height))
        bbox = (left, top, right, bottom)
    return LabelRecord(
        type=box.class_id,
        truncated=truncated,
        occluded=occluded,
        alpha=normalize_angle(box.theta - math.atan2(box.cx, box.cz)),
        bbox=bbox,
        dims=(box.h, box.w, box.l),
        location=(box.cx, box.cy + 0.5 * box.h, box.cz),
        rotation_y=box.theta,
        score=score,
    )


def frame_paths(root, frame_id: str) -> dict[str, Path]:
    root = Path(root)
    return {
        "velodyne": root / VELODYNE_DIR / f"{frame_id}.bin",
        "calib": root / CALIB_DIR / f"{frame_id}.txt",
        "label": root / LABEL_DIR / f"{frame_id}.txt",
        "masks": root / MASK_DIR / f"{frame_id}.json",
    }


def load_frame(
    root,
    frame_id: str,
    want_masks: bool = False,
    want_labels: bool = False,
    image_size: tuple[int, int] = DEFAULT_IMAGE_SIZE,
) -> Frame:
    """Load a frame from the directory layout written by write_kitti_frame.

    Missing mandatory files raise FileNotFoundError naming the frame.
    When masks are wanted and present, their dimensions override
    ``image_size`` for the calibration.
    """
    paths = frame_paths(root, frame_id)
    for kind in ("velodyne", "calib"):
        if not paths[kind].exists():
            raise FileNotFoundError(f"frame {frame_id}: missing {kind} file {paths[kind]}")
    masks = None
    if want_masks:
        if not paths["masks"].exists():
            raise FileNotFoundError(f"frame {frame_id}: missing masks file {paths['masks']}")
        masks = parse_masks(paths["masks"].read_text())
        image_size = (masks.image_width, masks.image_height)
    labels = None
    if want_labels:
        if not paths["label"].exists():
            raise FileNotFoundError(f"frame {frame_id}: missing label file {paths['label']}")
        labels = parse_label_file(paths["label"].read_text())
    cloud = read_velodyne(paths["velodyne"].read_bytes())
    calib = parse_calib(paths["calib"].read_text(), image_size=image_size)
    return Frame(frame_id, cloud, calib, masks=masks, labels=labels)


def write_kitti_frame(frame: Frame, root) -> None:
    """Write a frame into the standard directory layout under ``root``."""
    paths = frame_paths(root, frame.frame_id)
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    paths["velodyne"].write_bytes(write_velodyne(frame.cloud))
    paths["calib"].write_text(write_calib(frame.calib))
    if frame.labels is not None:
        paths["label"].write_text(write_label_file(frame.labels))
    if frame.masks is not None:
        paths["masks"].write_text(write_masks(frame.masks))
