"""Augmentation-benefit comparison on a 3-shot synthetic split.

Arm A trains the embedder alone; arm B trains the full game, augments each
training image k times and retrains the embedder on real + generated data.

    python scripts/run_compare.py --k 50 --seeds 0,1,2,3,4 --out runs/compare
"""
import argparse
import logging
from pathlib import Path

from facegan.dataio import whiten
from facegan.evaluation import ExperimentSpec, compare_augmentation, make_pairs
from facegan.synthetic import synthetic_faces
from facegan.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, default=50)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--shots", type=int, default=3)
    ap.add_argument("--test-images", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    per = args.shots + args.test_images
    images = [whiten(im) for im in synthetic_faces(8, per, 16, 1, seed=7)]
    train_set = [im for k, im in enumerate(images) if k % per < args.shots]
    pairs = make_pairs([im for k, im in enumerate(images) if k % per >= args.shots], seed=0)
    spec = ExperimentSpec(train_set, pairs, TrainConfig(epochs=args.epochs), args.k,
                          [int(s) for s in args.seeds.split(",")], args.out)
    rep = compare_augmentation(spec)
    print("A", rep.accuracies("A").round(4).tolist())
    print("B", rep.accuracies("B").round(4).tolist())
    print(f"mean(B-A) = {rep.mean_difference:+.4f}; B wins or ties in {rep.b_wins_or_ties}/{len(spec.seeds)} seeds")


if __name__ == "__main__":
    main()
