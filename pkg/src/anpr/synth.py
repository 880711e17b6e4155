"""Deterministic synthetic plate scenes with exact ground truth.

Every sample is a pure function of ``(spec.seed, index)``. Plates are white
rectangles with dark bitmap glyphs over a background capped at intensity
200, so the plate extent can be recovered by thresholding.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .annotation_io import ImageRecord, PixelBox, PlateSchema, emit_voc, indian_schema
from .errors import InfeasibleSpec, IoFailure
from .font import scaled_bitmap
from .geometry import TABLE_II, CoordStats

BACKGROUND_MAX = 200
PLATE_MIN = 232
MAX_TRIES = 1000


@dataclass
class SynthSpec:
    seed: int
    canvas: tuple[int, int] = (720, 1160)  # (width, height)
    schema: PlateSchema = field(default_factory=indian_schema)
    position: str = "uniform"  # "uniform" or "gaussian"
    stats: CoordStats | None = None
    # uniform mode: plate width as a fraction of canvas width, and width/height ratio
    plate_width_range: tuple[float, float] = (0.2, 0.4)
    plate_aspect_range: tuple[float, float] = (2.5, 3.5)
    # gaussian mode: floor on the width/height std derived from the corner stats
    min_size_std: float = 4.0
    min_plate_size: tuple[int, int] = (48, 20)
    background: str = "noise"  # "noise" or "solid"
    noise_amplitude: float = 12.0
    font_scale: float = 0.7
    name: str = "custom"

    def __post_init__(self):
        if self.seed is None:
            raise InfeasibleSpec("seed is mandatory")
        W, H = self.canvas
        if W <= 0 or H <= 0:
            raise InfeasibleSpec(f"canvas {self.canvas}")
        if self.position not in ("uniform", "gaussian"):
            raise InfeasibleSpec(f"unknown position mode {self.position!r}")
        if self.background not in ("noise", "solid"):
            raise InfeasibleSpec(f"unknown background mode {self.background!r}")
        if not 0 < self.font_scale <= 0.9:
            raise InfeasibleSpec("font_scale must be in (0, 0.9]")
        mw, mh = self.min_plate_size
        if mw > W or mh > H:
            raise InfeasibleSpec(f"minimum plate size {self.min_plate_size} exceeds canvas {self.canvas}")
        if self.position == "uniform":
            lo, hi = self.plate_width_range
            alo, ahi = self.plate_aspect_range
            if not (0 < lo <= hi <= 1 and 0 < alo <= ahi):
                raise InfeasibleSpec("bad plate size ranges")
            if lo * W / alo > H:
                raise InfeasibleSpec("plate cannot fit the canvas height")
        else:
            if self.stats is None:
                raise InfeasibleSpec("gaussian position mode needs stats")
            m = self.stats.means()
            if not (0 <= m["x_min"] < m["x_max"] <= W and 0 <= m["y_min"] < m["y_max"] <= H):
                raise InfeasibleSpec("mean box lies outside the canvas")

    def describe(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.name
        d["stats"] = None if self.stats is None else {
            k: [getattr(self.stats, k).mean, getattr(self.stats, k).std] for k in ("x_min", "x_max", "y_min", "y_max")
        }
        return d


def preset(name: str, seed: int, **overrides) -> SynthSpec:
    """``"ccpd-like"`` or ``"indian-like"``: corner statistics from the published table."""
    rows = {"ccpd-like": "CCPD_Base", "indian-like": "Indian"}
    if name not in rows:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(rows)}")
    kw = dict(position="gaussian", stats=TABLE_II[rows[name]], name=name)
    kw.update(overrides)
    return SynthSpec(seed=seed, **kw)


def _sample_box(spec: SynthSpec, rng: np.random.Generator) -> PixelBox:
    W, H = spec.canvas
    mw, mh = spec.min_plate_size
    for _ in range(MAX_TRIES):
        if spec.position == "uniform":
            pw = rng.uniform(*spec.plate_width_range) * W
            ph = pw / rng.uniform(*spec.plate_aspect_range)
            x0 = rng.uniform(0, W - pw) if pw < W else 0.0
            y0 = rng.uniform(0, H - ph) if ph < H else 0.0
        else:
            s = spec.stats
            w_mean = s.x_max.mean - s.x_min.mean
            h_mean = s.y_max.mean - s.y_min.mean
            w_std = max(math.sqrt(max(s.x_max.std**2 - s.x_min.std**2, 0.0)), spec.min_size_std)
            h_std = max(math.sqrt(max(s.y_max.std**2 - s.y_min.std**2, 0.0)), spec.min_size_std)
            x0 = rng.normal(s.x_min.mean, s.x_min.std)
            y0 = rng.normal(s.y_min.mean, s.y_min.std)
            pw = rng.normal(w_mean, w_std)
            ph = rng.normal(h_mean, h_std)
        x0, y0 = round(x0), round(y0)
        x1, y1 = x0 + round(pw), y0 + round(ph)
        if x1 - x0 >= mw and y1 - y0 >= mh and x0 >= 0 and y0 >= 0 and x1 <= W and y1 <= H:
            return PixelBox(x0, y0, x1, y1)
    raise InfeasibleSpec(f"no plate fitting the canvas after {MAX_TRIES} draws")


def _sample_plate(schema: PlateSchema, rng: np.random.Generator) -> str:
    lead = schema.lead_vocab[rng.integers(len(schema.lead_vocab))]
    tail = "".join(schema.tail_alphabet[i] for i in rng.integers(len(schema.tail_alphabet), size=schema.tail_len))
    return lead + tail


def _background(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    W, H = spec.canvas
    if spec.background == "solid":
        color = rng.integers(30, BACKGROUND_MAX - 30, size=3)
        img = np.broadcast_to(color, (H, W, 3)).astype(np.float32)
    else:
        coarse = rng.uniform(20, 180, size=(8, 6, 3)).astype(np.uint8)
        img = np.asarray(Image.fromarray(coarse).resize((W, H), Image.BILINEAR), dtype=np.float32)
    if spec.noise_amplitude > 0:
        img = img + rng.normal(0, spec.noise_amplitude, size=img.shape)
    return np.clip(img, 0, BACKGROUND_MAX)


def render_plate(img: np.ndarray, box: PixelBox, text: str, spec: SynthSpec, rng: np.random.Generator) -> None:
    x0, y0, x1, y1 = (int(v) for v in box.as_tuple())
    pw, ph = x1 - x0, y1 - y0
    plate = 245 + rng.normal(0, spec.noise_amplitude / 4, size=(ph, pw, 3))
    plate = np.clip(plate, PLATE_MIN, 255)
    # keep a white margin on all four sides so the plate extent stays recoverable
    tw = max(int(pw * 0.9), 1)
    th = max(int(ph * spec.font_scale), 1)
    mask = scaled_bitmap(text, th, tw)
    ox, oy = (pw - tw) // 2, (ph - th) // 2
    ink = np.clip(35 + rng.normal(0, spec.noise_amplitude / 2, size=(th, tw, 3)), 0, 90)
    region = plate[oy:oy + th, ox:ox + tw]
    region[mask] = ink[mask]
    img[y0:y1, x0:x1] = plate


def _draw_record(spec: SynthSpec, index: int, rng: np.random.Generator) -> ImageRecord:
    box = _sample_box(spec, rng)
    text = _sample_plate(spec.schema, rng)
    W, H = spec.canvas
    return ImageRecord(f"images/{index:04d}.png", W, H, 3, text, box, spec.name)


def sample_record(spec: SynthSpec, index: int) -> ImageRecord:
    """The record :func:`generate_sample` would return, without rendering pixels."""
    return _draw_record(spec, index, np.random.default_rng([spec.seed, index]))


def generate_sample(spec: SynthSpec, index: int) -> tuple[np.ndarray, ImageRecord]:
    """Render sample ``index``: an ``(H, W, 3)`` uint8 image and its record."""
    rng = np.random.default_rng([spec.seed, index])
    record = _draw_record(spec, index, rng)
    img = _background(spec, rng)
    render_plate(img, record.box, record.plate, spec, rng)
    return np.round(img).astype(np.uint8), record


def locate_plate(img: np.ndarray, threshold: int = PLATE_MIN - 2) -> PixelBox:
    """Bounding box of near-white pixels; recovers a rendered plate exactly."""
    mask = img.min(axis=2) >= threshold if img.ndim == 3 else img >= threshold
    ys, xs = np.nonzero(mask)
    if not len(xs):
        raise ValueError("no plate pixels found")
    return PixelBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def generate_dataset(spec: SynthSpec, count: int, out_dir) -> list[ImageRecord]:
    """Write ``images/NNNN.png``, ``annotations/NNNN.xml`` and ``manifest.txt``."""
    if count < 1:
        raise InfeasibleSpec("count must be >= 1")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "annotations").mkdir(parents=True, exist_ok=True)
        records = []
        for i in range(count):
            img, rec = generate_sample(spec, i)
            Image.fromarray(img).save(out / rec.image_path)
            (out / "annotations" / f"{i:04d}.xml").write_text(emit_voc(rec), encoding="utf-8")
            records.append(rec)
        lines = [f"count = {count}"] + [f"{k} = {v}" for k, v in sorted(spec.describe().items())]
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"writing synthetic dataset to {out}: {exc}") from exc
    return records
