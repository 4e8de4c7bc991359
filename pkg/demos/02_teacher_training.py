"""Train a small teacher and inspect the loss composition.

The teacher sees full-body data mixed with simulated occlusions; the loss is
alpha * (beta * identity + (1 - beta) * obc) + (1 - alpha) * saliency.  The
training log CSV carries every component so the blends can be re-checked.

Run:  python3 demos/02_teacher_training.py --out /tmp/cosreid_demo2 --epochs 8
"""

import argparse
from pathlib import Path

import numpy as np

from cosreid import ToyConfig, generate_toy_dataset
from cosreid.losses import LossBreakdown, LossWeights
from cosreid.trainer import read_train_log, toy_train_config, train_teacher


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="/tmp/cosreid_demo2")
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    out = Path(args.out)

    dataset = generate_toy_dataset(
        ToyConfig(n_identities=8, images_per_identity=8, image_size=64, figure_palette_seed=2),
        seed=args.seed,
    )
    cfg = toy_train_config(epochs=args.epochs, seed=args.seed, checkpoint_dir=out, checkpoint_every=0)
    checkpoint = train_teacher(dataset, cfg)
    print(f"teacher trained for {cfg.epochs} epochs; checkpoint stage={checkpoint.stage}")

    rows = read_train_log(out / "train_log.csv")
    weights = LossWeights()
    print(f"{'epoch':>5} {'p':>5} {'identity':>9} {'obc':>7} {'saliency':>9} {'total':>7}")
    for epoch in sorted({int(r["epoch"]) for r in rows}):
        block = [r for r in rows if r["epoch"] == epoch]
        mean = {k: np.mean([r[k] for r in block]) for k in ("identity", "obc", "saliency", "total", "p")}
        print(f"{epoch:>5} {mean['p']:>5.2f} {mean['identity']:>9.4f} {mean['obc']:>7.4f} "
              f"{mean['saliency']:>9.4f} {mean['total']:>7.4f}")

    worst = max(
        max(
            LossBreakdown(
                r["identity"], r["obc"], r["saliency"], r["multitask"], r["total"]
            ).composition_errors(weights)
        )
        for r in rows
    )
    print(f"worst blend-composition residual across {len(rows)} steps: {worst:.2e}")


if __name__ == "__main__":
    main()
