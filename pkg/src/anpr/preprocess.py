"""Image/annotation alignment transforms.

Every transform is expressed as an :class:`AffinePlan` (per-axis scale plus
offset, ``x' = scale_x * x + offset_x``) and the pixels and the box are both
moved through that plan, so annotations never drift from the image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from PIL import Image

from .annotation_io import ImageRecord, PixelBox, PlateSchema, parse_plate
from .errors import AnprError, BoxLost, NonInvertiblePlan, SizeMismatch
from .geometry import CoordStats, iou

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CanvasSpec:
    target_width: int = 720
    target_height: int = 1160
    pad_value: int = 128

    def __post_init__(self):
        if self.target_width <= 0 or self.target_height <= 0:
            raise ValueError("canvas dimensions must be positive")

    @property
    def size(self) -> tuple[int, int]:
        return self.target_width, self.target_height


@dataclass(frozen=True)
class AffinePlan:
    """Axis-aligned affine map from a source frame to an output canvas.

    ``crop`` is the part of the source image that lands on the canvas.
    """

    scale_x: float
    scale_y: float
    offset_x: float
    offset_y: float
    crop: PixelBox
    output_size: tuple[int, int]

    def apply(self, box: PixelBox) -> PixelBox:
        return PixelBox(
            self.scale_x * box.x_min + self.offset_x,
            self.scale_y * box.y_min + self.offset_y,
            self.scale_x * box.x_max + self.offset_x,
            self.scale_y * box.y_max + self.offset_y,
        )

    def then(self, other: "AffinePlan", source_size: tuple[int, int]) -> "AffinePlan":
        """Compose: apply ``self`` first, then ``other``."""
        sx, sy = self.scale_x * other.scale_x, self.scale_y * other.scale_y
        ox = other.scale_x * self.offset_x + other.offset_x
        oy = other.scale_y * self.offset_y + other.offset_y
        return _plan(sx, sy, ox, oy, source_size, other.output_size)


@dataclass(frozen=True)
class TargetDistribution:
    stats: CoordStats


def _plan(sx, sy, ox, oy, source_size, output_size) -> AffinePlan:
    W, H = source_size
    ow, oh = output_size
    # canvas corners pulled back into the source frame, then clipped to it
    crop = PixelBox(
        max(0.0, (0 - ox) / sx),
        max(0.0, (0 - oy) / sy),
        min(float(W), (ow - ox) / sx),
        min(float(H), (oh - oy) / sy),
    )
    return AffinePlan(sx, sy, ox, oy, crop, (ow, oh))


def identity_plan(width: int, height: int) -> AffinePlan:
    return _plan(1.0, 1.0, 0.0, 0.0, (width, height), (width, height))


def image_size(image: np.ndarray) -> tuple[int, int]:
    return image.shape[1], image.shape[0]


def _check_match(image: np.ndarray, record: ImageRecord) -> None:
    if image_size(image) != (record.width, record.height):
        raise SizeMismatch(
            f"record says {record.width}x{record.height}, image is {image.shape[1]}x{image.shape[0]}"
        )


def warp(image: np.ndarray, plan: AffinePlan, pad_value: int = 128) -> np.ndarray:
    """Resample ``image`` through ``plan`` (bilinear), padding uncovered pixels."""
    ow, oh = plan.output_size
    if (
        plan.scale_x == 1 and plan.scale_y == 1 and plan.offset_x == 0 and plan.offset_y == 0
        and image_size(image) == (ow, oh)
    ):
        return image.copy()
    pil = Image.fromarray(image)
    fill = pad_value if pil.mode == "L" else (pad_value,) * len(pil.getbands())
    # PIL takes the inverse map, output pixel -> source pixel
    coeffs = (
        1 / plan.scale_x, 0.0, -plan.offset_x / plan.scale_x,
        0.0, 1 / plan.scale_y, -plan.offset_y / plan.scale_y,
    )
    out = pil.transform((ow, oh), Image.AFFINE, coeffs, resample=Image.BILINEAR, fillcolor=fill)
    return np.asarray(out)


def _emit(image, record, plan, pad_value):
    ow, oh = plan.output_size
    new = replace(record, width=ow, height=oh, box=plan.apply(record.box))
    return warp(image, plan, pad_value), new, plan


def resize_plain(image: np.ndarray, record: ImageRecord, spec: CanvasSpec = CanvasSpec()):
    """Stretch to the canvas size, moving the box with independent x/y scales."""
    _check_match(image, record)
    sx = spec.target_width / record.width
    sy = spec.target_height / record.height
    plan = _plan(sx, sy, 0.0, 0.0, (record.width, record.height), spec.size)
    return _emit(image, record, plan, spec.pad_value)


def letterbox_plan(width: int, height: int, spec: CanvasSpec = CanvasSpec()) -> AffinePlan:
    s = min(spec.target_width / width, spec.target_height / height)
    ox = (spec.target_width - s * width) / 2
    oy = (spec.target_height - s * height) / 2
    return _plan(s, s, ox, oy, (width, height), spec.size)


def letterbox(image: np.ndarray, record: ImageRecord, spec: CanvasSpec = CanvasSpec()):
    """Aspect-preserving resize, centered on the canvas and padded with ``pad_value``."""
    _check_match(image, record)
    plan = letterbox_plan(record.width, record.height, spec)
    return _emit(image, record, plan, spec.pad_value)


def letterbox_invert(box: PixelBox, plan: AffinePlan) -> PixelBox:
    if plan.scale_x == 0 or plan.scale_y == 0 or not (math.isfinite(plan.scale_x) and math.isfinite(plan.scale_y)):
        raise NonInvertiblePlan(f"scales ({plan.scale_x}, {plan.scale_y})")
    return PixelBox(
        (box.x_min - plan.offset_x) / plan.scale_x,
        (box.y_min - plan.offset_y) / plan.scale_y,
        (box.x_max - plan.offset_x) / plan.scale_x,
        (box.y_max - plan.offset_y) / plan.scale_y,
    )


def shift_plans(record: ImageRecord, target: TargetDistribution | CoordStats) -> tuple[AffinePlan, AffinePlan]:
    """Plans for the two alignment steps, each mapping from the source frame.

    The first translates the image (cropping one side, padding the other) so
    the box's top-left corner lands on the target mean corner. The second
    additionally stretches about that corner so the box takes the target
    mean size, which also puts its center on the target mean center.
    """
    stats = target.stats if isinstance(target, TargetDistribution) else target
    t = stats.mean_box()
    b = record.box
    size = (record.width, record.height)
    dx, dy = t.x_min - b.x_min, t.y_min - b.y_min
    step1 = _plan(1.0, 1.0, dx, dy, size, size)
    moved = step1.apply(b)
    if moved.x_max > record.width or moved.y_max > record.height:
        raise BoxLost(f"translating {b.as_tuple()} to {t.x_min, t.y_min} cuts the plate")
    sx, sy = t.width / b.width, t.height / b.height
    step2 = _plan(sx, sy, t.x_min - sx * b.x_min, t.y_min - sy * b.y_min, size, size)
    return step1, step2


def distribution_shift(
    image: np.ndarray,
    record: ImageRecord,
    target: TargetDistribution | CoordStats,
    pad_value: int = 128,
    steps: int = 2,
):
    """Crop/translate then stretch the image so the box sits on the target mean box.

    ``steps=1`` stops after the translation. Returns ``(image, record, plan)``
    with the plan expressed from the source frame.
    """
    _check_match(image, record)
    step1, step2 = shift_plans(record, target)
    plan = step1 if steps == 1 else step2
    return _emit(image, record, plan, pad_value)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def filter_by_detector_iou(
    samples: Iterable[tuple[np.ndarray | str | Path, ImageRecord]],
    detector: Callable[[np.ndarray], PixelBox],
    threshold: float = 0.5,
    schema: PlateSchema | None = None,
) -> tuple[list[ImageRecord], list[float]]:
    """Keep records whose detector box overlaps the ground truth by more than ``threshold``.

    ``samples`` pairs each record with its image array or image path. A
    detector failure on one image is logged and scored as NaN (never kept).
    When ``schema`` is given, records whose plate is not schema-valid
    (including wrong length) are also dropped.
    """
    kept, ious = [], []
    for image, record in samples:
        try:
            if isinstance(image, (str, Path)):
                image = load_image(image)
            pred = detector(image)
            value = iou(pred, record.box)
        except Exception as exc:
            log.warning("detector failed on %s: %s", record.image_path, exc)
            ious.append(float("nan"))
            continue
        ious.append(value)
        if not value > threshold:
            continue
        if schema is not None:
            try:
                parse_plate(record.plate, schema)
            except AnprError:
                continue
        kept.append(record)
    return kept, ious
