"""RPnet-style detection + recognition network and its joint loss.

The trunk is ten conv blocks (conv, batch norm, ReLU, max pool, dropout).
The box head regresses ``(c_x, c_y, w, h)`` through a sigmoid. The
recognizer max-pools the predicted box region out of several trunk
feature maps and feeds the concatenation to one classifier per plate slot,
so classification gradients reach the trunk.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .annotation_io import PlateLabel, PlateSchema, decode_plate
from .errors import InvalidBox, LengthMismatch, ShapeMismatch
from .geometry import NormBox

CHECKPOINT_VERSION = "anpr-checkpoint/1"
BOX_EPS = 1e-6


@dataclass
class DetectorConfig:
    """Trunk and box-head layout. Defaults follow the public wR2 reference."""

    input_size: tuple[int, int] = (480, 480)  # (height, width)
    channels: tuple[int, ...] = (48, 64, 128, 160, 192, 192, 192, 192, 192, 192)
    kernels: tuple[int, ...] = (5, 5, 5, 5, 5, 5, 5, 5, 3, 3)
    conv_strides: tuple[int, ...] = (2, 1, 1, 1, 1, 1, 1, 1, 1, 1)
    pool_strides: tuple[int, ...] = (2, 1, 2, 1, 2, 1, 2, 1, 2, 1)
    dropout: float = 0.2
    box_head: tuple[int, ...] = (100, 100)

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        for name in ("channels", "kernels", "conv_strides", "pool_strides", "box_head"):
            setattr(self, name, tuple(getattr(self, name)))
        n = len(self.channels)
        if not (len(self.kernels) == len(self.conv_strides) == len(self.pool_strides) == n):
            raise ValueError("per-layer settings must all have one entry per conv layer")

    @property
    def conv_layer_count(self) -> int:
        return len(self.channels)


@dataclass
class RecognizerConfig:
    schema: PlateSchema
    roi_source_layers: tuple[int, ...] = (2, 4, 10)  # 1-based trunk block indices
    roi_pool_size: tuple[int, int] = (8, 16)  # (height, width) cells
    classifier_hidden: int = 128
    dropout: float = 0.0
    # batch-normalize the pooled ROI vector before the classifiers; the raw
    # max-pooled features share a large positive offset that stalls training
    roi_norm: bool = True

    def __post_init__(self):
        self.roi_source_layers = tuple(self.roi_source_layers)
        self.roi_pool_size = tuple(self.roi_pool_size)

    @property
    def num_classifiers(self) -> int:
        return self.schema.num_classifiers

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema"] = self.schema.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecognizerConfig":
        d = dict(d)
        d["schema"] = PlateSchema.from_dict(d["schema"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Modules


def _pool_out(n: int, stride: int) -> int:
    # MaxPool2d(kernel 2, padding 1)
    return (n + 2 - 2) // stride + 1


class Trunk(nn.Module):
    """Ten-block feature extractor; ``forward`` returns every block's output."""

    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        blocks = []
        in_ch = 3
        for ch, k, cs, ps in zip(cfg.channels, cfg.kernels, cfg.conv_strides, cfg.pool_strides):
            blocks.append(nn.Sequential(
                nn.Conv2d(in_ch, ch, k, stride=cs, padding=k // 2),
                nn.BatchNorm2d(ch),
                nn.ReLU(),
                nn.MaxPool2d(2, stride=ps, padding=1),
                nn.Dropout(cfg.dropout),
            ))
            in_ch = ch
        self.blocks = nn.ModuleList(blocks)
        self.images_seen = 0  # instrumentation: images pushed through the trunk

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        self.images_seen += x.shape[0]
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        return feats


def trunk_output_shapes(cfg: DetectorConfig) -> list[tuple[int, int, int]]:
    h, w = cfg.input_size
    shapes = []
    for ch, k, cs, ps in zip(cfg.channels, cfg.kernels, cfg.conv_strides, cfg.pool_strides):
        h = (h + 2 * (k // 2) - k) // cs + 1
        w = (w + 2 * (k // 2) - k) // cs + 1
        h, w = _pool_out(h, ps), _pool_out(w, ps)
        shapes.append((ch, h, w))
    return shapes


def roi_pool(feature: torch.Tensor, boxes: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Max-pool each box region of ``feature`` to ``size`` cells.

    ``boxes`` are normalized corners ``(x_min, y_min, x_max, y_max)``, one per
    batch item. Region edges are quantized outward (floor/ceil), clipped to
    the map and widened to at least one cell.
    """
    B, _, Hf, Wf = feature.shape
    if boxes.shape != (B, 4):
        raise ShapeMismatch(f"expected boxes of shape ({B}, 4), got {tuple(boxes.shape)}")
    out = []
    for b, (x0, y0, x1, y1) in enumerate(boxes.detach().tolist()):
        if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
            raise InvalidBox(f"non-finite box {x0, y0, x1, y1}")
        c0, c1 = max(math.floor(x0 * Wf), 0), min(math.ceil(x1 * Wf), Wf)
        r0, r1 = max(math.floor(y0 * Hf), 0), min(math.ceil(y1 * Hf), Hf)
        if c0 >= Wf or r0 >= Hf or c1 <= 0 or r1 <= 0 or x1 <= x0 or y1 <= y0:
            raise InvalidBox(f"box {x0, y0, x1, y1} has no cells on a {Hf}x{Wf} map")
        c1, r1 = max(c1, c0 + 1), max(r1, r0 + 1)
        out.append(F.adaptive_max_pool2d(feature[b:b + 1, :, r0:r1, c0:c1], size))
    return torch.cat(out, dim=0)


def center_to_corners(nbox: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = nbox.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


class RPNet(nn.Module):
    """Shared trunk with a box head and, optionally, per-slot plate classifiers."""

    def __init__(self, det_cfg: DetectorConfig, rec_cfg: RecognizerConfig | None = None):
        super().__init__()
        self.det_cfg = det_cfg
        self.rec_cfg = rec_cfg
        self.trunk = Trunk(det_cfg)
        shapes = trunk_output_shapes(det_cfg)
        ch, h, w = shapes[-1]
        layers, width = [], ch * h * w
        for hidden in det_cfg.box_head:
            layers += [nn.Linear(width, hidden), nn.ReLU()]
            width = hidden
        layers.append(nn.Linear(width, 4))
        self.box_head = nn.Sequential(*layers)
        self.classifiers = None
        if rec_cfg is not None:
            self.attach_recognizer(rec_cfg)

    def attach_recognizer(self, rec_cfg: RecognizerConfig) -> None:
        n_layers = self.det_cfg.conv_layer_count
        if any(not 1 <= i <= n_layers for i in rec_cfg.roi_source_layers):
            raise ValueError(f"roi_source_layers must be within 1..{n_layers}")
        shapes = trunk_output_shapes(self.det_cfg)
        ph, pw = rec_cfg.roi_pool_size
        width = sum(shapes[i - 1][0] for i in rec_cfg.roi_source_layers) * ph * pw
        self.rec_cfg = rec_cfg
        self.roi_norm = nn.BatchNorm1d(width) if rec_cfg.roi_norm else nn.Identity()
        self.classifiers = nn.ModuleList(
            nn.Sequential(
                nn.Linear(width, rec_cfg.classifier_hidden),
                nn.ReLU(),
                nn.Dropout(rec_cfg.dropout),
                nn.Linear(rec_cfg.classifier_hidden, n),
            )
            for n in rec_cfg.schema.class_counts
        )

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = self.det_cfg.input_size
        if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != (h, w):
            raise ShapeMismatch(f"expected a (B, 3, {h}, {w}) batch, got {tuple(x.shape)}")

    def box_from_features(self, feats: list[torch.Tensor]) -> torch.Tensor:
        z = self.box_head(feats[-1].flatten(1))
        return torch.sigmoid(z).clamp(BOX_EPS, 1 - BOX_EPS)

    def detect(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.box_from_features(self.trunk(x))

    def recognize(self, feats: list[torch.Tensor], nbox: torch.Tensor) -> list[torch.Tensor]:
        if self.classifiers is None:
            raise RuntimeError("model has no recognizer attached")
        corners = center_to_corners(nbox)
        pooled = [roi_pool(feats[i - 1], corners, self.rec_cfg.roi_pool_size) for i in self.rec_cfg.roi_source_layers]
        z = self.roi_norm(torch.cat([p.flatten(1) for p in pooled], dim=1))
        return [head(z) for head in self.classifiers]

    def forward(self, x: torch.Tensor, roi_boxes: torch.Tensor | None = None):
        """Return ``(nbox, logits)``; ``logits`` is None without a recognizer.

        ``roi_boxes`` overrides the predicted boxes for ROI pooling only.
        """
        self._check_input(x)
        feats = self.trunk(x)
        nbox = self.box_from_features(feats)
        if self.classifiers is None:
            return nbox, None
        logits = self.recognize(feats, nbox if roi_boxes is None else roi_boxes)
        return nbox, logits


def init_weights(model: nn.Module, seed: int | None = None) -> nn.Module:
    """Fan-in scaled (Kaiming) init; reproducible when ``seed`` is given."""
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            with torch.no_grad():
                m.weight.normal_(0, math.sqrt(2.0 / fan_in), generator=gen)
                m.bias.zero_()
        elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    if isinstance(model, RPNet):
        # start from the centered half-size box instead of a saturated sigmoid,
        # and from uniform slot posteriors
        with torch.no_grad():
            model.box_head[-1].weight.zero_()
            for head in model.classifiers or ():
                head[-1].weight.zero_()
    return model


def build_model(det_cfg: DetectorConfig, rec_cfg: RecognizerConfig | None = None, seed: int | None = 0) -> RPNet:
    return init_weights(RPNet(det_cfg, rec_cfg), seed)


# ---------------------------------------------------------------------------
# Input adapter


def prepare_image(image: np.ndarray, input_size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to ``input_size`` (height, width) and scale to [-1, 1]."""
    h, w = input_size
    pil = Image.fromarray(image).convert("RGB")
    if pil.size != (w, h):
        pil = pil.resize((w, h), Image.BILINEAR)
    arr = np.asarray(pil, dtype=np.float32)
    return torch.from_numpy((arr / 127.5 - 1.0).transpose(2, 0, 1).copy())


def prepare_batch(images: Sequence[np.ndarray], input_size: tuple[int, int]) -> torch.Tensor:
    return torch.stack([prepare_image(im, input_size) for im in images])


# ---------------------------------------------------------------------------
# Loss


def smooth_l1(d: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    a = d.abs()
    return torch.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)


@dataclass
class LossBreakdown:
    loc_loss: torch.Tensor
    cls_loss: torch.Tensor
    total: torch.Tensor
    weights: tuple[float, float]

    def item(self) -> dict[str, float]:
        return {
            "loc": float(self.loc_loss.detach()),
            "cls": float(self.cls_loss.detach()),
            "total": float(self.total.detach()),
        }


def joint_loss(
    pred_nbox: torch.Tensor,
    logits: Sequence[torch.Tensor] | None,
    gt_nbox: torch.Tensor,
    gt_indices: torch.Tensor | None,
    weights: tuple[float, float] = (1.0, 1.0),
) -> LossBreakdown:
    """Smooth-L1 box loss plus summed per-slot cross-entropy, averaged over the batch.

    The box term sums the four normalized components per image. With no
    logits the classification term is zero.
    """
    if pred_nbox.shape != gt_nbox.shape or pred_nbox.shape[-1] != 4:
        raise LengthMismatch(f"box shapes {tuple(pred_nbox.shape)} vs {tuple(gt_nbox.shape)}")
    loc = smooth_l1(pred_nbox - gt_nbox).sum(-1).mean()
    if logits is None:
        cls = torch.zeros((), dtype=loc.dtype)
    else:
        if gt_indices is None or gt_indices.shape[-1] != len(logits):
            got = None if gt_indices is None else gt_indices.shape[-1]
            raise LengthMismatch(f"{len(logits)} classifiers but {got} target indices")
        cls = sum(F.cross_entropy(lg, gt_indices[:, k]) for k, lg in enumerate(logits))
    w_loc, w_cls = weights
    return LossBreakdown(loc, cls, w_loc * loc + w_cls * cls, (w_loc, w_cls))


# ---------------------------------------------------------------------------
# Predictions


@dataclass
class Prediction:
    nbox: NormBox
    logits: list[np.ndarray] | None = None
    decoded: PlateLabel | None = None


def to_predictions(nbox: torch.Tensor, logits, schema: PlateSchema | None) -> list[Prediction]:
    boxes = nbox.detach().cpu().double().numpy()
    out = []
    for b, row in enumerate(boxes):
        nb = NormBox(*(float(v) for v in row))
        if logits is None:
            out.append(Prediction(nb))
            continue
        lg = [l[b].detach().cpu().numpy() for l in logits]
        out.append(Prediction(nb, lg, decode_plate([int(v.argmax()) for v in lg], schema)))
    return out


@torch.no_grad()
def predict(model: RPNet, images: Sequence[np.ndarray], batch_size: int = 8) -> list[Prediction]:
    model.eval()
    schema = model.rec_cfg.schema if model.rec_cfg else None
    out = []
    for i in range(0, len(images), batch_size):
        x = prepare_batch(images[i:i + batch_size], model.det_cfg.input_size)
        nbox, logits = model(x)
        out.extend(to_predictions(nbox, logits, schema))
    return out


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, model: RPNet, *, step: int = 0, history: dict | None = None, seed: int | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "detector_config": asdict(model.det_cfg),
        "recognizer_config": model.rec_cfg.to_dict() if model.rec_cfg else None,
        "state_dict": model.state_dict(),
        "step": step,
        "history": history or {},
        "seed": seed,
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


@dataclass
class Checkpoint:
    model: RPNet
    step: int
    history: dict
    seed: int | None
    extra: dict = field(default_factory=dict)

    @property
    def schema(self) -> PlateSchema | None:
        return self.model.rec_cfg.schema if self.model.rec_cfg else None


def load_checkpoint(path) -> Checkpoint:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    det = DetectorConfig(**payload["detector_config"])
    rec = payload["recognizer_config"]
    model = RPNet(det, RecognizerConfig.from_dict(rec) if rec else None)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return Checkpoint(model, payload["step"], payload["history"], payload["seed"], payload["extra"])
