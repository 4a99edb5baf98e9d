"""Random start versus learned start, trained side by side.

Both runs share data, seed and schedule. The only difference is where the
single FGSM step begins: uniform noise in the ball, or the generator's
proposal. Per epoch we print held-out accuracy under PGD-10.

    python demos/compare_inits.py --epochs 10
"""

import argparse
import dataclasses

from fgsmsdi import TrainConfig, synth_dataset, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = TrainConfig(epochs=args.epochs, seed=args.seed, train_size=1000, test_size=200)
    tr = synth_dataset(base.classes, base.train_size, base.dims, base.noise, base.data_seed, "train")
    te = synth_dataset(base.classes, base.test_size, base.dims, base.noise, base.data_seed, "test")

    curves = {}
    for method in ("fgsm-rs", "fgsm-sdi"):
        res = train(dataclasses.replace(base, method=method).resolved(), tr, te)
        curves[method] = [r.accuracy for r in res.records if r.split == "test" and r.attack == "pgd10"]
        print(f"{method}: best epoch {res.best_epoch}, overfit at {res.overfit_epoch}")

    print("epoch  fgsm-rs  fgsm-sdi")
    for e, (a, b) in enumerate(zip(curves["fgsm-rs"], curves["fgsm-sdi"]), 1):
        print(f"{e:5d}  {a:7.3f}  {b:8.3f}")


if __name__ == "__main__":
    main()
