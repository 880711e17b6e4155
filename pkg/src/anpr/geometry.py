"""Box normalization, IoU, the two accuracy rules and corner statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotation_io import ImageRecord, PixelBox
from .errors import DegenerateBox, EmptyDataset, NonPositiveImageSize

COORDS = ("x_min", "x_max", "y_min", "y_max")
TABLE_HEADER = ("X_min", "X_max", "Y_min", "Y_max")


@dataclass(frozen=True)
class NormBox:
    """Box center and size as fractions of image width/height."""

    c_x: float
    c_y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBox(f"non-positive normalized size ({self.w}, {self.h})")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.c_x, self.c_y, self.w, self.h)


@dataclass(frozen=True)
class MetricConfig:
    detection_iou_threshold: float = 0.7
    recognition_iou_threshold: float = 0.6

    def __post_init__(self):
        for t in (self.detection_iou_threshold, self.recognition_iou_threshold):
            if not 0 < t < 1:
                raise ValueError(f"IoU threshold {t} not in (0, 1)")


def _check_size(W, H):
    if not (W > 0 and H > 0):
        raise NonPositiveImageSize(f"image size {W}x{H}")


def normalize_box(box: PixelBox, W: float, H: float) -> NormBox:
    _check_size(W, H)
    cx, cy = box.center
    return NormBox(cx / W, cy / H, box.width / W, box.height / H)


def denormalize_box(nbox: NormBox, W: float, H: float) -> PixelBox:
    _check_size(W, H)
    half_w, half_h = nbox.w / 2, nbox.h / 2
    return PixelBox(
        (nbox.c_x - half_w) * W,
        (nbox.c_y - half_h) * H,
        (nbox.c_x + half_w) * W,
        (nbox.c_y + half_h) * H,
    )


def clip_box(box: PixelBox, W: float, H: float) -> PixelBox:
    """Clip to the image rectangle. Raises DegenerateBox if nothing is left."""
    return PixelBox(max(box.x_min, 0.0), max(box.y_min, 0.0), min(box.x_max, W), min(box.y_max, H))


def iou(a: PixelBox, b: PixelBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(inter / union, 1.0)


def detection_correct(pred: PixelBox, gt: PixelBox, cfg: MetricConfig = MetricConfig()) -> bool:
    return iou(pred, gt) > cfg.detection_iou_threshold


def recognition_correct(
    pred_box: PixelBox,
    pred_plate,
    gt_box: PixelBox,
    gt_plate,
    cfg: MetricConfig = MetricConfig(),
) -> bool:
    """Box overlap above the recognition threshold and an exact plate match.

    Plates may be :class:`PlateLabel` objects or plain strings.
    """
    pred_text = getattr(pred_plate, "text", pred_plate)
    gt_text = getattr(gt_plate, "text", gt_plate)
    return iou(pred_box, gt_box) > cfg.recognition_iou_threshold and pred_text == gt_text


def mean_iou(values: Sequence[float]) -> float:
    if not len(values):
        raise EmptyDataset("no IoU values")
    return float(np.mean(values))


def fraction_above(values: Sequence[float], threshold: float) -> float:
    if not len(values):
        raise EmptyDataset("no IoU values")
    return float(np.mean(np.asarray(values) > threshold))


# ---------------------------------------------------------------------------
# Corner statistics


@dataclass(frozen=True)
class CoordStat:
    mean: float
    std: float

    def __post_init__(self):
        if self.std < 0:
            raise ValueError("negative std")


@dataclass(frozen=True)
class CoordStats:
    """Per-corner mean and population std; ``count`` is None for published rows."""

    x_min: CoordStat
    x_max: CoordStat
    y_min: CoordStat
    y_max: CoordStat
    count: int | None = None

    def __post_init__(self):
        if self.count is not None and self.count < 1:
            raise ValueError("count must be >= 1")

    def means(self) -> dict[str, float]:
        return {c: getattr(self, c).mean for c in COORDS}

    def stds(self) -> dict[str, float]:
        return {c: getattr(self, c).std for c in COORDS}

    def mean_box(self) -> PixelBox:
        return PixelBox(self.x_min.mean, self.y_min.mean, self.x_max.mean, self.y_max.mean)

    @classmethod
    def from_pairs(cls, x_min, x_max, y_min, y_max, count=None) -> "CoordStats":
        return cls(CoordStat(*x_min), CoordStat(*x_max), CoordStat(*y_min), CoordStat(*y_max), count)


# Published corner statistics in the 720x1160 frame.
TABLE_II = {
    "CCPD_Base": CoordStats.from_pairs((263, 61), (449, 59), (478, 63), (546, 64)),
    "CCPD_Weather": CoordStats.from_pairs((227, 67), (493, 63), (474, 63), (575, 65)),
    "Indian": CoordStats.from_pairs((240, 110), (474, 113), (611, 88), (679, 81)),
}


def coord_stats(records: Iterable[ImageRecord | PixelBox]) -> CoordStats:
    """Corner mean/std over records (or bare boxes), in their own pixel frame."""
    boxes = [r.box if isinstance(r, ImageRecord) else r for r in records]
    if not boxes:
        raise EmptyDataset("coord_stats needs at least one record")
    arr = np.array([[b.x_min, b.x_max, b.y_min, b.y_max] for b in boxes], dtype=np.float64)
    mean = arr.mean(axis=0)
    std = arr.std(axis=0)
    return CoordStats(*(CoordStat(float(m), float(s)) for m, s in zip(mean, std)), count=len(boxes))


def format_stats_table(rows: Mapping[str, CoordStats], delimiter: str = "\t", decimals: int = 0) -> str:
    """Render rows as ``Dataset | X_min | X_max | Y_min | Y_max`` with mean±std cells."""
    lines = [delimiter.join(("Dataset",) + TABLE_HEADER)]
    for name, st in rows.items():
        cells = [f"{getattr(st, c).mean:.{decimals}f}±{getattr(st, c).std:.{decimals}f}" for c in COORDS]
        lines.append(delimiter.join([name] + cells))
    return "\n".join(lines) + "\n"


def parse_stats_table(text: str, delimiter: str | None = None) -> dict[str, CoordStats]:
    """Inverse of :func:`format_stats_table` (delimiter sniffed when not given)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyDataset("empty stats table")
    if delimiter is None:
        delimiter = "\t" if "\t" in lines[0] else ","
    header = [h.strip() for h in lines[0].split(delimiter)]
    try:
        cols = [header.index(h) for h in TABLE_HEADER]
    except ValueError:
        raise ValueError(f"stats table header must contain {TABLE_HEADER}, got {header}") from None
    out = {}
    for line in lines[1:]:
        cells = [c.strip() for c in line.split(delimiter)]
        pairs = []
        for col in cols:
            mean, _, std = cells[col].replace("+-", "±").partition("±")
            pairs.append((float(mean), float(std or 0)))
        out[cells[0]] = CoordStats.from_pairs(*pairs)
    return out
