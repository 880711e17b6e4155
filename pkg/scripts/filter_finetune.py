"""Fine-tune on the subset of a second domain where the detector already works.

A detector pre-trained on "ccpd-like" scenes scores "indian-like" scenes;
images whose predicted box overlaps the ground truth by more than
``--threshold`` are kept and used for end-to-end training.

    python scripts/filter_finetune.py --detector runs/toy/detector.pt --out runs/finetune
"""

import argparse
import logging
from pathlib import Path

from anpr.annotation_io import indian_schema
from anpr.dataset import synth_samples
from anpr.evaluate import evaluate_dataset, format_accuracy_table, model_detector
from anpr.network import load_checkpoint
from anpr.preprocess import filter_by_detector_iou
from anpr.synth import preset
from anpr.train import load_config, train_e2e

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--detector", required=True, help="pre-trained detector checkpoint")
    ap.add_argument("--config", default=ROOT / "configs" / "toy_e2e.toml")
    ap.add_argument("--count", type=int, default=400)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--threshold", type=float, default=0.5)
    ap.add_argument("--out", default="runs/finetune")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.detector)
    samples = synth_samples(preset("indian-like", seed=args.seed), args.count)
    kept, ious = filter_by_detector_iou(
        [(s.image(), s.record) for s in samples], model_detector(ckpt.model), args.threshold, indian_schema()
    )
    kept_names = {r.name for r in kept}
    subset = [s for s in samples if s.name in kept_names]
    print(f"kept {len(subset)}/{len(samples)} images with detector IoU > {args.threshold}")
    if not subset:
        return

    cfg = load_config(args.config)
    cfg.output = str(out / "finetuned.pt")
    held_out = synth_samples(preset("indian-like", seed=args.seed), 100, start=args.count)
    before = evaluate_dataset(ckpt.model, held_out)
    tuned = train_e2e(cfg, ckpt, subset, held_out)
    after = evaluate_dataset(tuned.model, held_out)
    print(format_accuracy_table({"indian-like, detector only": before, "indian-like, fine-tuned": after}))


if __name__ == "__main__":
    main()
