"""Score a fixed "ccpd-like" mean-box predictor on "indian-like" scenes,
before alignment, after the crop/translate step and after the stretch step.

    python scripts/replay_distribution_shift.py --count 200 --seed 5 --out runs/shift
"""

import argparse
from pathlib import Path

from anpr.errors import BoxLost
from anpr.evaluate import pyplot
from anpr.geometry import TABLE_II, coord_stats, format_stats_table, iou, mean_iou
from anpr.preprocess import distribution_shift
from anpr.synth import generate_sample, preset


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=5)
    ap.add_argument("--target", default="CCPD_Base", choices=sorted(TABLE_II))
    ap.add_argument("--out", default="runs/shift")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    target = TABLE_II[args.target]
    predictor = target.mean_box()
    spec = preset("indian-like", seed=args.seed)

    stages = {"original": [], "after crop": [], "after stretch": []}
    records = {k: [] for k in stages}
    lost = 0
    for i in range(args.count):
        img, rec = generate_sample(spec, i)
        try:
            _, r1, _ = distribution_shift(img, rec, target, steps=1)
            _, r2, _ = distribution_shift(img, rec, target, steps=2)
        except BoxLost:
            lost += 1
            continue
        for key, r in zip(stages, (rec, r1, r2)):
            stages[key].append(iou(predictor, r.box))
            records[key].append(r)

    print(f"{args.count - lost} images scored ({lost} skipped: plate cut by the translation)")
    for key, values in stages.items():
        print(f"{key:>14}: mean IoU {mean_iou(values):.4f}")
    table = format_stats_table({f"indian-like {k}": coord_stats(v) for k, v in records.items()} | {args.target: target})
    (out / "stats.tsv").write_text(table, encoding="utf-8")
    print(table)

    plt = pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(range(3), [mean_iou(v) for v in stages.values()], marker="o", color="k")
    ax.set_xticks(range(3), list(stages))
    ax.set_ylabel("mean IoU vs fixed predictor")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out / "progression.png")
    print(f"wrote {out / 'progression.png'}")


if __name__ == "__main__":
    main()
