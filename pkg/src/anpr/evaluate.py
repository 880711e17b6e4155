"""Dataset-level scoring, prediction files and reports.

Predictions are keyed by image filename. They come either from running a
model or from a plain text file, one line per image::

    filename,x_min,y_min,x_max,y_max,plate

with the box in that image's own pixel frame. A detector without a
recognizer writes an empty plate field.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotation_io import ImageRecord, PixelBox
from .dataset import Sample
from .errors import DataError, IoFailure, MissingPrediction
from .geometry import (
    CoordStats,
    MetricConfig,
    NormBox,
    coord_stats,
    denormalize_box,
    detection_correct,
    fraction_above,
    iou,
    mean_iou,
    recognition_correct,
)
from .network import Checkpoint, RPNet, load_checkpoint, predict

PRED_FIELDS = ("filename", "x_min", "y_min", "x_max", "y_max", "plate")


@dataclass(frozen=True)
class PlatePrediction:
    box: PixelBox
    plate: str = ""


Predictions = Mapping[str, PlatePrediction]


@dataclass(frozen=True)
class EvalRow:
    name: str
    gt_box: PixelBox
    pred_box: PixelBox
    gt_plate: str
    pred_plate: str
    iou: float
    detected: bool
    recognized: bool


@dataclass
class EvalReport:
    rows: list[EvalRow]
    metric: MetricConfig
    detection_accuracy: float
    recognition_accuracy: float
    mean_iou: float
    iou_above_recognition_threshold: float
    pred_stats: CoordStats

    def summary(self) -> dict[str, float]:
        return {
            "images": len(self.rows),
            "detection_accuracy": self.detection_accuracy,
            "recognition_accuracy": self.recognition_accuracy,
            "mean_iou": self.mean_iou,
            "iou_above_recognition_threshold": self.iou_above_recognition_threshold,
        }

    def rows_text(self, delimiter: str = ",") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        w.writerow(("filename", "iou", "detected", "recognized", "gt_plate", "pred_plate"))
        for r in self.rows:
            w.writerow((r.name, f"{r.iou:.6f}", int(r.detected), int(r.recognized), r.gt_plate, r.pred_plate))
        return buf.getvalue()


# ---------------------------------------------------------------------------
# Prediction exchange


def _unique_names(records: Iterable[ImageRecord]) -> list[str]:
    names = [r.name for r in records]
    seen = set()
    for n in names:
        if n in seen:
            raise DataError(f"duplicate image filename {n!r}; predictions are keyed by filename")
        seen.add(n)
    return names


def predict_samples(model: RPNet, samples: Sequence[Sample], batch_size: int = 8) -> dict[str, PlatePrediction]:
    """Run ``model`` over ``samples`` and express boxes in each image's pixel frame."""
    _unique_names(s.record for s in samples)
    out = {}
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        preds = predict(model, [s.image() for s in chunk], batch_size=batch_size)
        for s, p in zip(chunk, preds):
            box = _to_pixels(p.nbox, s.record)
            out[s.name] = PlatePrediction(box, p.decoded.text if p.decoded is not None else "")
    return out


def _to_pixels(nbox: NormBox, record: ImageRecord) -> PixelBox:
    return denormalize_box(nbox, record.width, record.height)


def write_predictions(preds: Predictions, path) -> None:
    """Floats are written with ``repr`` so reading them back is exact."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRED_FIELDS)
            for name, p in preds.items():
                w.writerow((name, *(repr(float(v)) for v in p.box.as_tuple()), p.plate))
    except OSError as exc:
        raise IoFailure(f"writing predictions to {path}: {exc}") from exc


def read_predictions(path) -> dict[str, PlatePrediction]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"reading predictions from {path}: {exc}") from exc
    out = {}
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or (lineno == 1 and row[0] == PRED_FIELDS[0]):
            continue
        if len(row) not in (5, 6):
            raise DataError(f"{path}:{lineno}: expected 6 fields, got {len(row)}")
        try:
            coords = [float(v) for v in row[1:5]]
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric box {row[1:5]}") from None
        if row[0] in out:
            raise DataError(f"{path}:{lineno}: duplicate entry for {row[0]!r}")
        out[row[0]] = PlatePrediction(PixelBox(*coords), row[5] if len(row) == 6 else "")
    return out


# ---------------------------------------------------------------------------
# Scoring


def score(preds: Predictions, records: Sequence[ImageRecord], metric: MetricConfig = MetricConfig()) -> EvalReport:
    """Apply both accuracy rules to every record; rows follow ``records`` order."""
    _unique_names(records)
    if not records:
        raise DataError("nothing to evaluate")
    rows = []
    for r in records:
        try:
            p = preds[r.name]
        except KeyError:
            raise MissingPrediction(f"no prediction for {r.name!r}") from None
        rows.append(EvalRow(
            name=r.name,
            gt_box=r.box,
            pred_box=p.box,
            gt_plate=r.plate,
            pred_plate=p.plate,
            iou=iou(p.box, r.box),
            detected=detection_correct(p.box, r.box, metric),
            recognized=recognition_correct(p.box, p.plate, r.box, r.plate, metric),
        ))
    ious = [row.iou for row in rows]
    return EvalReport(
        rows=rows,
        metric=metric,
        detection_accuracy=float(np.mean([row.detected for row in rows])),
        recognition_accuracy=float(np.mean([row.recognized for row in rows])),
        mean_iou=mean_iou(ious),
        iou_above_recognition_threshold=fraction_above(ious, metric.recognition_iou_threshold),
        pred_stats=coord_stats(row.pred_box for row in rows),
    )


def evaluate_dataset(
    source: RPNet | Checkpoint | Predictions | str | Path,
    data: Sequence[Sample] | Sequence[ImageRecord],
    metric: MetricConfig = MetricConfig(),
    batch_size: int = 8,
) -> EvalReport:
    """Score a model, a checkpoint, a prediction mapping or a prediction file.

    A path ending in ``.pt`` is read as a checkpoint, any other path as a
    prediction file. Running a model needs :class:`Sample` items (images);
    prediction files and mappings work with bare records too.
    """
    data = list(data)
    records = [d.record if isinstance(d, Sample) else d for d in data]
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source) if str(source).endswith(".pt") else read_predictions(source)
    if isinstance(source, Checkpoint):
        source = source.model
    if isinstance(source, RPNet):
        if not all(isinstance(d, Sample) for d in data):
            raise TypeError("scoring a model needs samples with images, not bare records")
        source = predict_samples(source, data, batch_size)
    return score(source, records, metric)


def model_detector(model: RPNet):
    """Adapter for :func:`anpr.preprocess.filter_by_detector_iou`: image -> pixel box."""

    def detect(image: np.ndarray) -> PixelBox:
        (p,) = predict(model, [image])
        h, w = image.shape[:2]
        return denormalize_box(p.nbox, w, h)

    return detect


# ---------------------------------------------------------------------------
# Reports


def format_accuracy_table(reports: Mapping[str, EvalReport], delimiter: str = "\t") -> str:
    """One row per dataset: both accuracies (percent), mean IoU, image count."""
    header = ("Dataset", "Detection accuracy (%)", "Recognition accuracy (%)", "Mean IoU", "Images")
    lines = [delimiter.join(header)]
    for name, rep in reports.items():
        lines.append(delimiter.join((
            name,
            f"{100 * rep.detection_accuracy:.2f}",
            f"{100 * rep.recognition_accuracy:.2f}",
            f"{rep.mean_iou:.4f}",
            str(len(rep.rows)),
        )))
    return "\n".join(lines) + "\n"


def pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_iou_histogram(report: EvalReport, path, bins: int = 20) -> None:
    plt = pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist([r.iou for r in report.rows], bins=bins, range=(0, 1), color="0.4")
    for t, style in ((report.metric.recognition_iou_threshold, ":"), (report.metric.detection_iou_threshold, "--")):
        ax.axvline(t, color="k", linestyle=style, linewidth=1)
    ax.set_xlabel("IoU")
    ax.set_ylabel("images")
    ax.set_title(f"mean IoU {report.mean_iou:.3f}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_loss_curves(history: Mapping[str, Sequence[float]], path) -> None:
    """Plot every per-epoch loss series in a training history."""
    plt = pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    epochs = history["epoch"]
    for key in ("loss", "loc", "cls", "total"):
        if key in history and len(history[key]) == len(epochs):
            ax.plot(epochs, history[key], marker=".", label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
