"""``anpr`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 bad input data.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from PIL import Image, ImageDraw

from .annotation_io import ImageRecord, ccpd_schema, indian_schema, write_voc
from .errors import AnprError, BoxLost, DataError
from .geometry import TABLE_II, coord_stats, denormalize_box, format_stats_table, parse_stats_table

log = logging.getLogger("anpr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# prep / stats / synth


def _target_stats(args):
    if args.target_stats:
        rows = parse_stats_table(Path(args.target_stats).read_text(encoding="utf-8"))
        if args.target_row:
            if args.target_row not in rows:
                raise UsageError(f"row {args.target_row!r} not in {args.target_stats}; have {sorted(rows)}")
            return rows[args.target_row]
        return next(iter(rows.values()))
    row = args.target_row or "CCPD_Base"
    if row not in TABLE_II:
        raise UsageError(f"unknown published row {row!r}; choose from {sorted(TABLE_II)}")
    return TABLE_II[row]


def cmd_prep(args) -> int:
    from .dataset import load_samples
    from .preprocess import CanvasSpec, distribution_shift, letterbox, resize_plain

    canvas = CanvasSpec(args.width, args.height, args.pad)
    target = _target_stats(args) if args.mode == "shift" else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = skipped = 0
    for s in load_samples(args.inp):
        image = s.image()
        try:
            if args.mode == "letterbox":
                img, rec, _ = letterbox(image, s.record, canvas)
            elif args.mode == "resize":
                img, rec, _ = resize_plain(image, s.record, canvas)
            else:
                img, rec, _ = distribution_shift(image, s.record, target, canvas.pad_value, steps=args.steps)
        except BoxLost as exc:
            log.warning("skipping %s: %s", s.name, exc)
            skipped += 1
            continue
        name = Path(s.name)
        rec = ImageRecord(name.name, rec.width, rec.height, rec.depth, rec.plate, rec.box, rec.tag)
        Image.fromarray(img).save(out / name.name)
        write_voc(rec, out / f"{name.stem}.xml")
        written += 1
    print(f"wrote {written} image(s) to {out}" + (f", skipped {skipped}" if skipped else ""))
    return EXIT_OK


def cmd_stats(args) -> int:
    from .dataset import load_samples

    rows = {}
    for d in args.inp:
        rows[Path(d).name or str(d)] = coord_stats(s.record for s in load_samples(d))
    if args.published:
        rows.update(TABLE_II)
    sys.stdout.write(format_stats_table(rows, delimiter=args.delimiter, decimals=args.decimals))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import SynthSpec, generate_dataset, preset

    schema = indian_schema() if args.schema == "indian" else ccpd_schema()
    if args.preset == "uniform":
        spec = SynthSpec(seed=args.seed, schema=schema, name="uniform")
    else:
        spec = preset(args.preset, seed=args.seed, schema=schema)
    generate_dataset(spec, args.count, args.out)
    print(f"wrote {args.count} sample(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / eval / infer


def cmd_train(args) -> int:
    from .evaluate import plot_loss_curves
    from .train import load_config, pretrain_detector, train_e2e

    try:
        cfg = load_config(args.config)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.output:
        cfg.output = args.output
    if cfg.output is None:
        cfg.output = f"{args.stage}.pt"
    if args.stage == "detector":
        ckpt = pretrain_detector(cfg)
        print(f"held-out mean IoU {ckpt.history['val_mean_iou'][-1]:.4f}")
    else:
        ckpt = train_e2e(cfg, args.detector_ckpt or cfg.detector_checkpoint)
        h = ckpt.history
        drop = 1 - h["final"]["total"] / h["total"][0]
        print(f"total loss {h['total'][0]:.4f} -> {h['final']['total']:.4f} ({100 * drop:.2f}% lower)")
    print(f"checkpoint: {cfg.output}")
    if args.plot:
        plot_loss_curves(ckpt.history, args.plot)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .dataset import load_samples
    from .evaluate import evaluate_dataset, format_accuracy_table, plot_iou_histogram, predict_samples, write_predictions
    from .network import load_checkpoint

    samples = load_samples(args.data)
    if args.ckpt:
        model = load_checkpoint(args.ckpt).model
        preds = predict_samples(model, samples)
        if args.export_preds:
            write_predictions(preds, args.export_preds)
        report = evaluate_dataset(preds, samples)
    else:
        report = evaluate_dataset(args.preds, [s.record for s in samples])
    sys.stdout.write(format_accuracy_table({Path(args.data).name or args.data: report}))
    if args.rows:
        Path(args.rows).write_text(report.rows_text(), encoding="utf-8")
    if args.hist:
        plot_iou_histogram(report, args.hist)
    if args.json:
        print(json.dumps(report.summary()))
    return EXIT_OK


def cmd_infer(args) -> int:
    from .network import load_checkpoint, predict
    from .preprocess import load_image

    model = load_checkpoint(args.ckpt).model
    image = load_image(args.image)
    (p,) = predict(model, [image])
    h, w = image.shape[:2]
    box = denormalize_box(p.nbox, w, h)
    plate = p.decoded.text if p.decoded is not None else ""
    print(" ".join(f"{v:.1f}" for v in box.as_tuple()) + (f" {plate}" if plate else ""))
    if args.overlay:
        pil = Image.fromarray(image)
        draw = ImageDraw.Draw(pil)
        draw.rectangle(box.as_tuple(), outline=(255, 0, 0), width=3)
        if plate:
            draw.text((box.x_min, max(box.y_min - 14, 0)), plate, fill=(255, 0, 0))
        pil.save(args.overlay)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anpr", description="Number-plate detection and recognition toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    prep = sub.add_parser("prep", help="align images and annotations to a canvas")
    prep.add_argument("mode", choices=("letterbox", "resize", "shift"))
    prep.add_argument("--in", dest="inp", required=True)
    prep.add_argument("--out", required=True)
    prep.add_argument("--width", type=int, default=720)
    prep.add_argument("--height", type=int, default=1160)
    prep.add_argument("--pad", type=int, default=128)
    prep.add_argument("--target-stats", help="stats table file (as printed by `anpr stats`)")
    prep.add_argument("--target-row", help="row of the stats table; defaults to CCPD_Base when no file is given")
    prep.add_argument("--steps", type=int, choices=(1, 2), default=2, help="shift: 1 = translate only")
    prep.set_defaults(func=cmd_prep)

    stats = sub.add_parser("stats", help="corner mean/std table of annotated directories")
    stats.add_argument("--in", dest="inp", action="append", required=True)
    stats.add_argument("--published", action="store_true", help="append the published reference rows")
    stats.add_argument("--delimiter", default="\t")
    stats.add_argument("--decimals", type=int, default=0)
    stats.set_defaults(func=cmd_stats)

    train = sub.add_parser("train", help="pre-train the detector or train end to end")
    train.add_argument("stage", choices=("detector", "e2e"))
    train.add_argument("--config", required=True)
    train.add_argument("--output")
    train.add_argument("--detector-ckpt")
    train.add_argument("--plot", help="write a loss-curve image")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a checkpoint or a prediction file")
    src = ev.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--preds")
    ev.add_argument("--data", required=True)
    ev.add_argument("--rows", help="write per-image rows")
    ev.add_argument("--hist", help="write an IoU histogram image")
    ev.add_argument("--export-preds", help="with --ckpt: write the model's predictions")
    ev.add_argument("--json", action="store_true", help="also print the summary as JSON")
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="detect and read one image")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--image", required=True)
    inf.add_argument("--overlay")
    inf.set_defaults(func=cmd_infer)

    syn = sub.add_parser("synth", help="write a synthetic dataset")
    syn.add_argument("--out", required=True)
    syn.add_argument("--count", type=int, required=True)
    syn.add_argument("--seed", type=int, required=True)
    syn.add_argument("--preset", choices=("ccpd-like", "indian-like", "uniform"), default="indian-like")
    syn.add_argument("--schema", choices=("indian", "ccpd"), default="indian")
    syn.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataError, OSError) as exc:
        print(f"anpr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, AnprError, ValueError) as exc:
        print(f"anpr: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
