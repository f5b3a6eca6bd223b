#!/usr/bin/env python3
"""End-to-end toy experiment: synthesize data, run the two-stage training,
evaluate against the identity baseline, and run the prior-failure ablation.

Writes everything under --out (default runs/toy_experiment).  Expect a few
minutes on a desktop CPU.
"""

import argparse
import sys
from pathlib import Path

from radialssm.cli import main as cli_main


def sh(args):
    print("+ radialssm " + " ".join(args))
    code = cli_main(args)
    if code != 0:
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/toy_experiment")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--train-n", type=int, default=64)
    ap.add_argument("--eval-n", type=int, default=16)
    ap.add_argument("--fpn-iterations", type=int, default=4000)
    ap.add_argument("--main-iterations", type=int, default=1500)
    args = ap.parse_args()
    out = Path(args.out)

    sh(["synth", "--n", str(args.train_n), "--seed", str(args.seed),
        "--out", str(out / "train")])
    sh(["synth", "--n", str(args.eval_n), "--seed", str(args.seed + 10_000),
        "--out", str(out / "heldout")])
    sh(["train", "--stage", "fpn", "--dataset", str(out / "train"),
        "--iterations", str(args.fpn_iterations), "--seed", str(args.seed),
        "--out", str(out / "fpn")])
    sh(["train", "--stage", "main", "--dataset", str(out / "train"),
        "--iterations", str(args.main_iterations), "--seed", str(args.seed),
        "--fpn-checkpoint", str(out / "fpn" / "checkpoint.ckpt"),
        "--out", str(out / "main")])
    sh(["eval", "--dataset", str(out / "heldout"),
        "--fpn-checkpoint", str(out / "fpn" / "checkpoint.ckpt"),
        "--main-checkpoint", str(out / "main" / "checkpoint.ckpt"),
        "--out", str(out / "eval")])
    sh(["eval", "--dataset", str(out / "heldout"), "--identity",
        "--out", str(out / "eval_identity")])
    sh(["ablate", "--dataset", str(out / "heldout"),
        "--fpn-checkpoint", str(out / "fpn" / "checkpoint.ckpt"),
        "--main-checkpoint", str(out / "main" / "checkpoint.ckpt"),
        "--out", str(out / "ablation")])
    print(f"\ndone; see {out}/eval/metrics.tsv and {out}/ablation/ablation.tsv")


if __name__ == "__main__":
    main()
