"""Loading annotated image sets from disk or from the synthetic generator."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .annotation_io import ImageRecord, PlateSchema, encode_plate, read_voc
from .errors import AnprError, EmptyDataset, InvalidAnnotation
from .geometry import normalize_box
from .network import prepare_image
from .preprocess import load_image
from .synth import SynthSpec, generate_sample, sample_record

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class Sample:
    record: ImageRecord
    loader: Callable[[], np.ndarray]
    source: str = ""

    @property
    def name(self) -> str:
        return self.record.name

    def image(self) -> np.ndarray:
        return self.loader()


def _find_image(directory: Path, stem: str) -> Path | None:
    for ext in IMAGE_EXTS:
        p = directory / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def load_samples(directory) -> list[Sample]:
    """Read a dataset directory.

    Two layouts are understood: ``images/`` + ``annotations/`` (the synthetic
    generator's output) or Pascal VOC files sitting next to their images.
    All annotation problems are collected before raising.
    """
    root = Path(directory)
    ann_dir = root / "annotations"
    if ann_dir.is_dir():
        xmls, img_dirs = sorted(ann_dir.glob("*.xml")), [root / "images", root]
    else:
        xmls, img_dirs = sorted(root.glob("*.xml")), [root]
    samples, problems = [], []
    for xml in xmls:
        try:
            rec = read_voc(xml)
        except AnprError as exc:
            problems.append((str(xml), str(exc)))
            continue
        path = root / rec.image_path
        if not path.is_file():
            path = next((p for d in img_dirs if (p := _find_image(d, xml.stem))), None)
        if path is None:
            problems.append((str(xml), "no matching image file"))
            continue
        samples.append(Sample(rec, partial(load_image, path), str(path)))
    if problems:
        raise InvalidAnnotation(problems)
    if not samples:
        raise EmptyDataset(f"no annotated images in {root}")
    return samples


def synth_samples(spec: SynthSpec, count: int, start: int = 0) -> list[Sample]:
    """Lazily generated samples ``start .. start+count-1`` of ``spec``."""
    return [
        Sample(sample_record(spec, i), partial(_synth_image, spec, i), f"synth:{spec.name}:{i}")
        for i in range(start, start + count)
    ]


def _synth_image(spec: SynthSpec, index: int) -> np.ndarray:
    return generate_sample(spec, index)[0]


def hash_fraction(name: str) -> float:
    digest = hashlib.sha1(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


def hash_split(samples: Sequence[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Deterministic split by filename hash; adding files never moves existing ones."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    train, val = [], []
    for s in samples:
        (val if hash_fraction(s.name) < val_fraction else train).append(s)
    return train, val


@dataclass
class TensorSet:
    """Samples resized once to the network input size and kept as uint8."""

    samples: list[Sample]
    images: torch.Tensor  # (N, 3, H, W) uint8
    boxes: torch.Tensor  # (N, 4) normalized (c_x, c_y, w, h), float32
    indices: torch.Tensor | None  # (N, 1 + tail_len) int64

    def __len__(self):
        return len(self.samples)

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
        x = self.images[idx].float() / 127.5 - 1.0
        y = self.indices[idx] if self.indices is not None else None
        return x, self.boxes[idx], y

    @property
    def records(self) -> list[ImageRecord]:
        return [s.record for s in self.samples]


def build_tensor_set(samples: Iterable[Sample], input_size: tuple[int, int], schema: PlateSchema | None = None) -> TensorSet:
    samples = list(samples)
    if not samples:
        raise EmptyDataset("no samples")
    images, boxes, indices = [], [], []
    for s in samples:
        x = prepare_image(s.image(), input_size)
        images.append(torch.round((x + 1.0) * 127.5).clamp(0, 255).to(torch.uint8))
        r = s.record
        boxes.append(normalize_box(r.box, r.width, r.height).as_tuple())
        if schema is not None:
            indices.append(encode_plate(r.plate, schema))
    return TensorSet(
        samples,
        torch.stack(images),
        torch.tensor(boxes, dtype=torch.float32),
        torch.tensor(indices, dtype=torch.int64) if schema is not None else None,
    )
