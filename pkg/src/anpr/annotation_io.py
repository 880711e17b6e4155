"""Ground-truth annotations: Pascal VOC XML, CCPD filenames and plate schemas."""

from __future__ import annotations

import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import (
    DegenerateBox,
    GrammarError,
    IndexOutOfVocab,
    InvalidLead,
    InvalidRecord,
    InvalidTailChar,
    MalformedXml,
    MissingField,
    WrongLength,
)

CCPD_PLATE_LEN = 7
CCPD_IMAGE_SIZE = (720, 1160)


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned box in pixel coordinates, (x_min, y_min) inclusive corner."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def rounded(self) -> "PixelBox":
        return PixelBox(*(float(round(v)) for v in self.as_tuple()))


@dataclass(frozen=True)
class ImageRecord:
    """One annotated image.

    ``plate`` is the raw object name from the annotation. It is validated
    against a :class:`PlateSchema` only on demand (:meth:`plate_label`),
    since source annotations may hold plates the schema rejects.
    """

    image_path: str
    width: int
    height: int
    depth: int
    plate: str
    box: PixelBox
    tag: str = "unknown"

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise InvalidRecord(f"non-positive image size {self.width}x{self.height}")
        if self.depth not in (1, 3):
            raise InvalidRecord(f"depth must be 1 or 3, got {self.depth}")
        b = self.box
        if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
            raise InvalidRecord(
                f"box {b.as_tuple()} outside image {self.width}x{self.height}"
            )

    @property
    def name(self) -> str:
        return os.path.basename(self.image_path)

    def plate_label(self, schema: "PlateSchema", enforce_length: bool = True) -> "PlateLabel":
        return parse_plate(self.plate, schema, enforce_length=enforce_length)


# ---------------------------------------------------------------------------
# Plate schemas


@dataclass(frozen=True)
class PlateSchema:
    """Plate grammar: one lead code followed by ``tail_len`` tail symbols."""

    lead_vocab: tuple[str, ...]
    tail_alphabet: tuple[str, ...]
    tail_len: int
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "lead_vocab", tuple(self.lead_vocab))
        object.__setattr__(self, "tail_alphabet", tuple(self.tail_alphabet))
        for label, vocab in (("lead_vocab", self.lead_vocab), ("tail_alphabet", self.tail_alphabet)):
            if not vocab:
                raise ValueError(f"{label} is empty")
            if len(set(vocab)) != len(vocab):
                raise ValueError(f"{label} contains duplicates")
        if any(len(s) != 1 for s in self.tail_alphabet):
            raise ValueError("tail symbols must be single characters")
        if any(not code for code in self.lead_vocab):
            raise ValueError("empty lead code")
        if self.tail_len < 1:
            raise ValueError("tail_len must be >= 1")

    @property
    def num_classifiers(self) -> int:
        return 1 + self.tail_len

    @property
    def class_counts(self) -> list[int]:
        return [len(self.lead_vocab)] + [len(self.tail_alphabet)] * self.tail_len

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lead_vocab": list(self.lead_vocab),
            "tail_alphabet": list(self.tail_alphabet),
            "tail_len": self.tail_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlateSchema":
        return cls(tuple(d["lead_vocab"]), tuple(d["tail_alphabet"]), int(d["tail_len"]), d.get("name", "custom"))


@dataclass(frozen=True)
class PlateLabel:
    text: str
    lead: str
    tail: str


def read_vocab_file(path) -> list[str]:
    """One symbol or code per line; blank lines and ``#`` comments are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    return _vocab_lines(text)


def _vocab_lines(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(line)
    return out


def _packaged_vocab(name: str) -> list[str]:
    return _vocab_lines(resources.files("anpr.data").joinpath(name).read_text(encoding="utf-8"))


def load_schema(lead_file, tail_file, tail_len: int, name: str = "custom") -> PlateSchema:
    return PlateSchema(tuple(read_vocab_file(lead_file)), tuple(read_vocab_file(tail_file)), tail_len, name)


def indian_schema(tail_len: int = 8) -> PlateSchema:
    """State/UT code plus ``tail_len`` symbols from the 34-symbol alphabet.

    The default (8) gives 9 classifiers reading 10-character plates.
    """
    return PlateSchema(
        tuple(_packaged_vocab("indian_states.txt")),
        tuple(_packaged_vocab("indian_tail.txt")),
        tail_len,
        name="indian",
    )


def ccpd_schema() -> PlateSchema:
    """Province symbol plus six symbols from the CCPD ``ads`` table (7 classifiers)."""
    return PlateSchema(
        tuple(_packaged_vocab("ccpd_provinces.txt")),
        tuple(_packaged_vocab("ccpd_ads.txt")),
        CCPD_PLATE_LEN - 1,
        name="ccpd",
    )


def parse_plate(text: str, schema: PlateSchema, enforce_length: bool = True) -> PlateLabel:
    lead = max((code for code in schema.lead_vocab if text.startswith(code)), key=len, default=None)
    if lead is None:
        raise InvalidLead(f"{text!r} does not start with a known lead code")
    tail = text[len(lead):]
    label = PlateLabel(text, lead, tail)
    _check_tail(label, schema, enforce_length)
    return label


def _check_tail(label: PlateLabel, schema: PlateSchema, enforce_length: bool) -> None:
    allowed = set(schema.tail_alphabet)
    bad = [c for c in label.tail if c not in allowed]
    if bad:
        raise InvalidTailChar(f"{label.text!r} contains symbols outside the tail alphabet: {bad}")
    if enforce_length and len(label.tail) != schema.tail_len:
        raise WrongLength(
            f"{label.text!r} has {len(label.tail)} tail symbols, schema wants {schema.tail_len}"
        )


def encode_plate(label: PlateLabel | str, schema: PlateSchema) -> list[int]:
    """Class indices: lead-vocab index, then one tail-alphabet index per symbol."""
    if isinstance(label, str):
        label = parse_plate(label, schema)
    if label.lead not in schema.lead_vocab:
        raise InvalidLead(f"unknown lead code {label.lead!r}")
    _check_tail(label, schema, enforce_length=True)
    tail_index = {s: i for i, s in enumerate(schema.tail_alphabet)}
    return [schema.lead_vocab.index(label.lead)] + [tail_index[c] for c in label.tail]


def decode_plate(indices: Sequence[int], schema: PlateSchema) -> PlateLabel:
    indices = [int(i) for i in indices]
    if len(indices) != schema.num_classifiers:
        raise WrongLength(f"expected {schema.num_classifiers} indices, got {len(indices)}")
    for slot, (i, n) in enumerate(zip(indices, schema.class_counts)):
        if not 0 <= i < n:
            raise IndexOutOfVocab(f"slot {slot}: index {i} not in [0, {n})")
    lead = schema.lead_vocab[indices[0]]
    tail = "".join(schema.tail_alphabet[i] for i in indices[1:])
    return PlateLabel(lead + tail, lead, tail)


# ---------------------------------------------------------------------------
# Pascal VOC


def _child(parent: ET.Element, tag: str) -> ET.Element:
    node = parent.find(tag)
    if node is None:
        raise MissingField(f"<{parent.tag}> has no <{tag}>")
    return node


def _text(parent: ET.Element, tag: str) -> str:
    node = _child(parent, tag)
    if node.text is None or not node.text.strip():
        raise MissingField(f"<{tag}> is empty")
    return node.text.strip()


def _number(parent: ET.Element, tag: str) -> float:
    raw = _text(parent, tag)
    try:
        return float(raw)
    except ValueError:
        raise MalformedXml(f"<{tag}> is not numeric: {raw!r}") from None


def parse_voc(xml_text: str | bytes) -> ImageRecord:
    """Parse a labelImg-style Pascal VOC document.

    Only the first ``<object>`` is read; plate images carry one plate each.
    The ``<source><database>`` value becomes the record tag.
    """
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as exc:
        raise MalformedXml(str(exc)) from None
    if root.tag != "annotation":
        raise MalformedXml(f"root element is <{root.tag}>, expected <annotation>")

    size = _child(root, "size")
    width = int(_number(size, "width"))
    height = int(_number(size, "height"))
    depth_node = size.find("depth")
    depth = int(float(depth_node.text)) if depth_node is not None and depth_node.text else 3

    obj = _child(root, "object")
    plate = _text(obj, "name")
    bnd = _child(obj, "bndbox")
    box = PixelBox(*(_number(bnd, t) for t in ("xmin", "ymin", "xmax", "ymax")))

    path_node = root.find("path")
    if path_node is not None and path_node.text and path_node.text.strip():
        image_path = path_node.text.strip()
    else:
        folder = (root.findtext("folder") or "").strip()
        image_path = os.path.join(folder, _text(root, "filename"))
    tag = (root.findtext("source/database") or "unknown").strip() or "unknown"

    try:
        return ImageRecord(image_path, width, height, depth, plate, box, tag)
    except InvalidRecord:
        raise
    except DegenerateBox as exc:
        raise InvalidRecord(str(exc)) from None


def emit_voc(record: ImageRecord) -> str:
    """Serialize a record with the labelImg element set. Coordinates are rounded."""
    if not isinstance(record, ImageRecord):
        raise InvalidRecord(f"not an ImageRecord: {type(record).__name__}")
    try:
        box = record.box.rounded()
        # rounding may collapse sub-pixel boxes or push them past the border
        ImageRecord(record.image_path, record.width, record.height, record.depth, record.plate, box, record.tag)
    except (DegenerateBox, InvalidRecord) as exc:
        raise InvalidRecord(str(exc)) from None

    root = ET.Element("annotation")
    folder, filename = os.path.split(record.image_path)
    ET.SubElement(root, "folder").text = folder
    ET.SubElement(root, "filename").text = filename
    ET.SubElement(root, "path").text = record.image_path
    source = ET.SubElement(root, "source")
    ET.SubElement(source, "database").text = record.tag
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = str(record.depth)
    ET.SubElement(root, "segmented").text = "0"
    obj = ET.SubElement(root, "object")
    ET.SubElement(obj, "name").text = record.plate
    ET.SubElement(obj, "pose").text = "unspecified"
    ET.SubElement(obj, "truncated").text = "0"
    ET.SubElement(obj, "difficult").text = "0"
    bnd = ET.SubElement(obj, "bndbox")
    for tag, value in zip(("xmin", "ymin", "xmax", "ymax"), box.as_tuple()):
        ET.SubElement(bnd, tag).text = str(int(value))
    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="unicode") + "\n"


def read_voc(path) -> ImageRecord:
    return parse_voc(Path(path).read_bytes())


def write_voc(record: ImageRecord, path) -> None:
    Path(path).write_text(emit_voc(record), encoding="utf-8")


# ---------------------------------------------------------------------------
# CCPD filenames


@dataclass(frozen=True)
class CcpdTables:
    provinces: tuple[str, ...]
    alphabets: tuple[str, ...]
    ads: tuple[str, ...]

    def slot_tables(self) -> list[tuple[str, ...]]:
        return [self.provinces, self.alphabets] + [self.ads] * (CCPD_PLATE_LEN - 2)

    def decode(self, indices: Sequence[int]) -> str:
        if len(indices) != CCPD_PLATE_LEN:
            raise GrammarError(f"CCPD plates have {CCPD_PLATE_LEN} indices, got {len(indices)}")
        out = []
        for slot, (i, table) in enumerate(zip(indices, self.slot_tables())):
            if not 0 <= i < len(table):
                raise IndexOutOfVocab(f"slot {slot}: index {i} not in [0, {len(table)})")
            out.append(table[i])
        return "".join(out)


def load_ccpd_tables() -> CcpdTables:
    return CcpdTables(
        tuple(_packaged_vocab("ccpd_provinces.txt")),
        tuple(_packaged_vocab("ccpd_alphabets.txt")),
        tuple(_packaged_vocab("ccpd_ads.txt")),
    )


@dataclass(frozen=True)
class CcpdFilenameFields:
    """Annotation fields packed into a CCPD image filename.

    ``area_ratio`` is stored as the per-mille integer of the filename divided
    by 1000. Vertices keep the filename order.
    """

    area_ratio: float
    tilt_h: int
    tilt_v: int
    box: PixelBox
    vertices: tuple[tuple[int, int], ...]
    plate_indices: tuple[int, ...]
    brightness: int
    blurriness: int
    suffix: str = field(default=".jpg", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(tuple(v) for v in self.vertices))
        object.__setattr__(self, "plate_indices", tuple(self.plate_indices))
        if len(self.vertices) != 4:
            raise GrammarError(f"expected 4 vertices, got {len(self.vertices)}")
        if len(self.plate_indices) != CCPD_PLATE_LEN:
            raise GrammarError(f"expected {CCPD_PLATE_LEN} plate indices, got {len(self.plate_indices)}")


def _ints(text: str, sep: str, n: int, what: str) -> list[int]:
    parts = text.split(sep)
    if len(parts) != n:
        raise GrammarError(f"{what}: expected {n} values separated by {sep!r}, got {text!r}")
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise GrammarError(f"{what}: non-integer value in {text!r}") from None


def _point(text: str) -> tuple[int, int]:
    x, y = _ints(text, "&", 2, "point")
    return x, y


def format_ccpd_filename(fields: CcpdFilenameFields) -> str:
    area = round(fields.area_ratio * 1000)
    if not 0 <= area <= 999:
        raise GrammarError(f"area ratio {fields.area_ratio} not representable")
    b = fields.box
    box = f"{int(b.x_min)}&{int(b.y_min)}_{int(b.x_max)}&{int(b.y_max)}"
    verts = "_".join(f"{x}&{y}" for x, y in fields.vertices)
    plate = "_".join(str(i) for i in fields.plate_indices)
    return (
        f"{area:03d}-{fields.tilt_h}_{fields.tilt_v}-{box}-{verts}-{plate}"
        f"-{fields.brightness}-{fields.blurriness}{fields.suffix}"
    )


def parse_ccpd_filename(name: str, tables: CcpdTables | None = None) -> CcpdFilenameFields:
    """Parse ``area-tiltH_tiltV-x1&y1_x2&y2-v1_v2_v3_v4-i0_.._i6-bright-blur.jpg``.

    When ``tables`` is given the plate indices are range-checked against them.
    """
    stem, suffix = os.path.splitext(os.path.basename(name))
    parts = stem.split("-")
    if len(parts) != 7:
        raise GrammarError(f"expected 7 '-'-separated fields, got {len(parts)} in {name!r}")
    area_s, tilt_s, box_s, vert_s, plate_s, bright_s, blur_s = parts
    if not area_s.isdigit():
        raise GrammarError(f"area field is not numeric: {area_s!r}")
    tilt_h, tilt_v = _ints(tilt_s, "_", 2, "tilt")
    corners = box_s.split("_")
    if len(corners) != 2:
        raise GrammarError(f"box field needs 2 points: {box_s!r}")
    (x1, y1), (x2, y2) = (_point(c) for c in corners)
    vert_parts = vert_s.split("_")
    if len(vert_parts) != 4:
        raise GrammarError(f"vertex field needs 4 points: {vert_s!r}")
    vertices = tuple(_point(v) for v in vert_parts)
    indices = tuple(_ints(plate_s, "_", CCPD_PLATE_LEN, "plate"))
    (brightness,) = _ints(bright_s, "_", 1, "brightness")
    (blurriness,) = _ints(blur_s, "_", 1, "blurriness")
    try:
        box = PixelBox(x1, y1, x2, y2)
    except DegenerateBox as exc:
        raise GrammarError(str(exc)) from None
    if tables is not None:
        tables.decode(indices)
    return CcpdFilenameFields(
        int(area_s) / 1000, tilt_h, tilt_v, box, vertices, indices, brightness, blurriness, suffix
    )


def ccpd_record(path, tables: CcpdTables | None = None, size=CCPD_IMAGE_SIZE, tag: str | None = None) -> ImageRecord:
    """Build an :class:`ImageRecord` straight from a CCPD image path."""
    tables = tables or load_ccpd_tables()
    fields = parse_ccpd_filename(str(path), tables)
    width, height = size
    if tag is None:
        tag = Path(path).parent.name or "ccpd"
    return ImageRecord(str(path), width, height, 3, tables.decode(fields.plate_indices), fields.box, tag)
