#!/usr/bin/env python3
"""Plot loss curves emitted by the train subcommand.

Usage: plot_loss_curves.py runs/fpn/loss_curve.tsv [more.tsv ...] -o curves.png
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("curves", nargs="+")
    ap.add_argument("-o", "--output", default="loss_curves.png")
    args = ap.parse_args()

    fig, ax = plt.subplots(figsize=(7, 4))
    for path in args.curves:
        rows = np.genfromtxt(path, delimiter="\t", names=True)
        ax.plot(rows["iteration"], rows["total"], label=path)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
