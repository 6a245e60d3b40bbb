"""Plot per-stage loss curves from a run's ``losses.csv``.

    python scripts/plot_losses.py OUTPUT_DIR [--out losses.png]

Stage 1 rows hold the concatenated clip histories, so its x axis counts
iterations across clips. Needs matplotlib (``pip install .[plot]``).
"""
import argparse
import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def read_curves(path):
    curves = defaultdict(list)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curves[row["stage"]].append(float(row["loss"]))
    return curves


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir", type=Path)
    p.add_argument("--out", type=Path, help="image path (default: RUN_DIR/losses.png)")
    args = p.parse_args()
    curves = read_curves(args.run_dir / "losses.csv")
    if not curves:
        raise SystemExit("losses.csv has no rows")
    fig, axes = plt.subplots(1, len(curves), figsize=(4 * len(curves), 3.2), squeeze=False)
    for ax, (stage, losses) in zip(axes[0], sorted(curves.items())):
        ax.semilogy(range(len(losses)), [max(v, 1e-300) for v in losses])
        ax.set_title(stage)
        ax.set_xlabel("iteration")
        ax.grid(True, which="both", alpha=0.3)
    axes[0][0].set_ylabel("loss")
    fig.tight_layout()
    out = args.out or args.run_dir / "losses.png"
    fig.savefig(out, dpi=120)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
