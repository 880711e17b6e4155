"""Detector pre-training and end-to-end training."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from .annotation_io import PlateSchema, ccpd_schema, indian_schema, load_schema, parse_plate
from .dataset import Sample, TensorSet, build_tensor_set, hash_split, load_samples, synth_samples
from .errors import AnprError, EmptyDataset, MissingDetectorCheckpoint, SchemaMismatch
from .annotation_io import PixelBox
from .geometry import iou
from .network import (
    Checkpoint,
    DetectorConfig,
    RecognizerConfig,
    RPNet,
    build_model,
    center_to_corners,
    joint_loss,
    load_checkpoint,
    save_checkpoint,
)
from .synth import preset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # data: directories, or a synthetic preset generated on the fly
    train_dirs: list[str] = field(default_factory=list)
    val_dirs: list[str] = field(default_factory=list)
    val_fraction: float = 0.2
    synth_preset: str | None = None
    synth_seed: int = 0
    synth_train_count: int = 200
    synth_val_count: int = 50
    # plate schema: "indian", "ccpd", or vocab files
    schema: str = "indian"
    tail_len: int = 8
    lead_file: str | None = None
    tail_file: str | None = None
    # optimization
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_step: int = 10
    lr_gamma: float = 0.1
    loss_weights: tuple[float, float] = (1.0, 1.0)
    grad_clip: float | None = None
    seed: int = 0
    # model
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    roi_source_layers: tuple[int, ...] = (2, 4, 10)
    roi_pool_size: tuple[int, int] = (8, 16)
    classifier_hidden: int = 128
    roi_norm: bool = True
    # outputs
    output: str | None = None
    checkpoint_every: int = 0
    detector_checkpoint: str | None = None

    def __post_init__(self):
        if isinstance(self.detector, dict):
            self.detector = DetectorConfig(**self.detector)
        self.loss_weights = tuple(self.loss_weights)
        self.roi_source_layers = tuple(self.roi_source_layers)
        self.roi_pool_size = tuple(self.roi_pool_size)
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def plate_schema(self) -> PlateSchema:
        if self.lead_file and self.tail_file:
            return load_schema(self.lead_file, self.tail_file, self.tail_len)
        if self.schema == "indian":
            return indian_schema(self.tail_len)
        if self.schema == "ccpd":
            return ccpd_schema()
        raise ValueError(f"unknown schema {self.schema!r}")

    def recognizer_config(self, schema: PlateSchema) -> RecognizerConfig:
        return RecognizerConfig(
            schema, self.roi_source_layers, self.roi_pool_size, self.classifier_hidden, roi_norm=self.roi_norm
        )


def load_config(path) -> TrainConfig:
    """Read a TOML training config (flat keys plus an optional ``[detector]`` table)."""
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return TrainConfig.from_dict(tomllib.load(fh))


def gather_samples(cfg: TrainConfig) -> tuple[list[Sample], list[Sample]]:
    if cfg.synth_preset:
        spec = preset(cfg.synth_preset, seed=cfg.synth_seed, schema=cfg.plate_schema())
        train = synth_samples(spec, cfg.synth_train_count)
        val = synth_samples(spec, cfg.synth_val_count, start=cfg.synth_train_count)
        return train, val
    if not cfg.train_dirs:
        raise EmptyDataset("no training data configured")
    train = [s for d in cfg.train_dirs for s in load_samples(d)]
    if cfg.val_dirs:
        val = [s for d in cfg.val_dirs for s in load_samples(d)]
    else:
        train, val = hash_split(train, cfg.val_fraction)
    if not train:
        raise EmptyDataset("training split is empty")
    return train, val


def _optimizer(model: torch.nn.Module, cfg: TrainConfig):
    if cfg.optimizer == "adam":
        opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    else:
        opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(cfg.lr_step, 1), gamma=cfg.lr_gamma)
    return opt, sched


def _seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return torch.Generator().manual_seed(seed)


def _batches(n: int, batch_size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen) if gen is not None else torch.arange(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _norm_corners_iou(pred: torch.Tensor, gt: torch.Tensor) -> list[float]:
    out = []
    for p, g in zip(center_to_corners(pred).tolist(), center_to_corners(gt).tolist()):
        out.append(iou(PixelBox(*p), PixelBox(*g)))
    return out


@torch.no_grad()
def evaluate_tensor_set(model: RPNet, data: TensorSet, batch_size: int = 16, weights=(1.0, 1.0)) -> dict:
    """Eval-mode losses and IoUs (in normalized coordinates) over a cached set."""
    model.eval()
    totals = {"loc": 0.0, "cls": 0.0, "total": 0.0}
    ious, correct = [], []
    for idx in _batches(len(data), batch_size, None):
        x, gt_box, gt_idx = data.batch(idx)
        nbox, logits = model(x)
        use_cls = logits is not None and gt_idx is not None
        loss = joint_loss(nbox, logits if use_cls else None, gt_box, gt_idx if use_cls else None, weights)
        for k, v in loss.item().items():
            totals[k] += v * len(idx)
        ious.extend(_norm_corners_iou(nbox, gt_box))
        if use_cls:
            pred_idx = torch.stack([lg.argmax(1) for lg in logits], dim=1)
            correct.extend((pred_idx == gt_idx).all(1).tolist())
    n = len(data)
    out = {k: v / n for k, v in totals.items()}
    out["mean_iou"] = sum(ious) / n
    out["ious"] = ious
    if correct:
        out["plate_accuracy"] = sum(correct) / n
    return out


def _train_epoch(model, data, opt, cfg, gen, with_cls) -> dict:
    model.train()
    sums = {"loc": 0.0, "cls": 0.0, "total": 0.0}
    for idx in _batches(len(data), cfg.batch_size, gen):
        x, gt_box, gt_idx = data.batch(idx)
        if with_cls:
            nbox, logits = model(x)
            loss = joint_loss(nbox, logits, gt_box, gt_idx, cfg.loss_weights)
        else:
            nbox = model.detect(x)
            loss = joint_loss(nbox, None, gt_box, None, cfg.loss_weights)
        opt.zero_grad()
        loss.total.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        for k, v in loss.item().items():
            sums[k] += v * len(idx)
    return {k: v / len(data) for k, v in sums.items()}


def _maybe_save(cfg, model, epoch, history, final=False, kind="detector"):
    if not cfg.output:
        return
    if final or (cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0):
        path = Path(cfg.output)
        if not final:
            path = path.with_name(f"{path.stem}.epoch{epoch:03d}{path.suffix}")
        save_checkpoint(path, model, step=epoch, history=history, seed=cfg.seed,
                        extra={"kind": kind, "train_config": _plain(cfg.to_dict())})


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def pretrain_detector(cfg: TrainConfig, train: list[Sample] | None = None, val: list[Sample] | None = None) -> Checkpoint:
    """Train trunk + box head on the localization loss alone.

    History holds one entry per epoch (``loss``, ``val_mean_iou``); entry 0
    is the untrained model.
    """
    if train is None:
        train, val = gather_samples(cfg)
    if not train:
        raise EmptyDataset("training set is empty")
    train = build_tensor_set(train, cfg.detector.input_size)
    val = build_tensor_set(val, cfg.detector.input_size) if val else None
    gen = _seed_everything(cfg.seed)
    model = build_model(cfg.detector, None, seed=cfg.seed)
    opt, sched = _optimizer(model, cfg)
    history = {"epoch": [], "loss": [], "val_mean_iou": [], "seconds": []}

    def log_epoch(epoch, loss, t0):
        v = evaluate_tensor_set(model, val)["mean_iou"] if val is not None and len(val) else float("nan")
        history["epoch"].append(epoch)
        history["loss"].append(loss)
        history["val_mean_iou"].append(v)
        history["seconds"].append(time.perf_counter() - t0)
        log.info("detector epoch %d loss %.5f val mean IoU %.4f", epoch, loss, v)

    t0 = time.perf_counter()
    log_epoch(0, evaluate_tensor_set(model, train, weights=cfg.loss_weights)["loc"] * cfg.loss_weights[0], t0)
    for epoch in range(1, cfg.epochs + 1):
        stats = _train_epoch(model, train, opt, cfg, gen, with_cls=False)
        sched.step()
        log_epoch(epoch, stats["total"], t0)
        _maybe_save(cfg, model, epoch, history)
    model.eval()
    _maybe_save(cfg, model, cfg.epochs, history, final=True)
    return Checkpoint(model, cfg.epochs, history, cfg.seed, {"kind": "detector"})


def _schema_filter(samples: list[Sample], schema: PlateSchema) -> list[Sample]:
    kept = []
    for s in samples:
        try:
            parse_plate(s.record.plate, schema)
        except AnprError:
            continue
        kept.append(s)
    dropped = len(samples) - len(kept)
    if dropped:
        log.warning("dropped %d of %d samples whose plates do not fit schema %s", dropped, len(samples), schema.name)
    return kept


def train_e2e(
    cfg: TrainConfig,
    detector_ckpt: Checkpoint | str | Path | None,
    train: list[Sample] | None = None,
    val: list[Sample] | None = None,
) -> Checkpoint:
    """Attach plate classifiers to a pre-trained detector and train everything jointly.

    History entry 0 is the eval-mode loss of the starting model on the
    training set; entries 1.. are running means over each epoch; ``final``
    holds the eval-mode losses after training.
    """
    if detector_ckpt is None:
        detector_ckpt = cfg.detector_checkpoint
    if detector_ckpt is None:
        raise MissingDetectorCheckpoint("end-to-end training needs a pre-trained detector checkpoint")
    if not isinstance(detector_ckpt, Checkpoint):
        detector_ckpt = load_checkpoint(detector_ckpt)

    schema = cfg.plate_schema()
    if detector_ckpt.schema is not None and detector_ckpt.schema != schema:
        raise SchemaMismatch(
            f"checkpoint reads {detector_ckpt.schema.num_classifiers}-slot {detector_ckpt.schema.name} plates, "
            f"config asks for {schema.num_classifiers}-slot {schema.name}"
        )
    if train is None:
        train, val = gather_samples(cfg)
    all_train = list(train)
    train = _schema_filter(all_train, schema)
    if not train:
        raise SchemaMismatch(f"none of the {len(all_train)} training plates fit schema {schema.name}")
    if len(train) < len(all_train):
        log.warning("dropped %d training plate(s) outside schema %s", len(all_train) - len(train), schema.name)
    val = _schema_filter(list(val or []), schema)

    gen = _seed_everything(cfg.seed)
    det_cfg = detector_ckpt.model.det_cfg
    model = build_model(det_cfg, cfg.recognizer_config(schema), seed=cfg.seed)
    missing, unexpected = model.load_state_dict(detector_ckpt.model.state_dict(), strict=False)
    if unexpected or any(not k.startswith(("classifiers.", "roi_norm.")) for k in missing):
        raise SchemaMismatch(f"detector checkpoint does not match the model layout: {missing, unexpected}")

    train_set = build_tensor_set(train, det_cfg.input_size, schema)
    val_set = build_tensor_set(val, det_cfg.input_size, schema) if val else None
    opt, sched = _optimizer(model, cfg)
    history = {k: [] for k in ("epoch", "loc", "cls", "total", "val_mean_iou", "val_plate_accuracy", "seconds")}
    t0 = time.perf_counter()

    def log_epoch(epoch, stats):
        history["epoch"].append(epoch)
        for k in ("loc", "cls", "total"):
            history[k].append(stats[k])
        v = evaluate_tensor_set(model, val_set, weights=cfg.loss_weights) if val_set is not None else {}
        history["val_mean_iou"].append(v.get("mean_iou", float("nan")))
        history["val_plate_accuracy"].append(v.get("plate_accuracy", float("nan")))
        history["seconds"].append(time.perf_counter() - t0)
        log.info("e2e epoch %d loss %.4f (loc %.5f cls %.4f)", epoch, stats["total"], stats["loc"], stats["cls"])

    log_epoch(0, evaluate_tensor_set(model, train_set, weights=cfg.loss_weights))
    for epoch in range(1, cfg.epochs + 1):
        stats = _train_epoch(model, train_set, opt, cfg, gen, with_cls=True)
        sched.step()
        log_epoch(epoch, stats)
        _maybe_save(cfg, model, epoch, history, kind="e2e")
    final = evaluate_tensor_set(model, train_set, weights=cfg.loss_weights)
    history["final"] = {k: final[k] for k in ("loc", "cls", "total", "mean_iou", "plate_accuracy")}
    model.eval()
    _maybe_save(cfg, model, cfg.epochs, history, final=True, kind="e2e")
    return Checkpoint(model, cfg.epochs, history, cfg.seed, {"kind": "e2e", "train_size": len(train)})
