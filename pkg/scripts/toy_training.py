"""Pre-train the toy detector, train end to end, and report on both splits.

    python scripts/toy_training.py --out runs/toy
"""

import argparse
import json
import logging
from pathlib import Path

from anpr.evaluate import evaluate_dataset, format_accuracy_table, plot_iou_histogram, plot_loss_curves
from anpr.train import gather_samples, load_config, pretrain_detector, train_e2e

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--detector-config", default=ROOT / "configs" / "toy_detector.toml")
    ap.add_argument("--e2e-config", default=ROOT / "configs" / "toy_e2e.toml")
    ap.add_argument("--out", default="runs/toy")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det_cfg, e2e_cfg = load_config(args.detector_config), load_config(args.e2e_config)
    det_cfg.output, e2e_cfg.output = str(out / "detector.pt"), str(out / "e2e.pt")

    train, val = gather_samples(det_cfg)
    det = pretrain_detector(det_cfg, train, val)
    plot_loss_curves(det.history, out / "detector_loss.png")
    e2e = train_e2e(e2e_cfg, det, train, val)
    plot_loss_curves(e2e.history, out / "e2e_loss.png")

    reports = {"train": evaluate_dataset(e2e.model, train), "held-out": evaluate_dataset(e2e.model, val)}
    table = format_accuracy_table(reports)
    (out / "accuracy.tsv").write_text(table, encoding="utf-8")
    for name, rep in reports.items():
        plot_iou_histogram(rep, out / f"iou_{name}.png")
        (out / f"rows_{name}.csv").write_text(rep.rows_text(), encoding="utf-8")

    h = e2e.history
    summary = {
        "detector_val_mean_iou": det.history["val_mean_iou"][-1],
        "e2e_total_loss_start": h["total"][0],
        "e2e_total_loss_end": h["final"]["total"],
        "e2e_total_loss_reduction": 1 - h["final"]["total"] / h["total"][0],
        **{f"{name}_{k}": v for name, rep in reports.items() for k, v in rep.summary().items()},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(table)
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
