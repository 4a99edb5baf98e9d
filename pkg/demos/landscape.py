"""Loss surface around a batch, before and after adversarial training.

A robust model should look flat in the gradient-sign direction; an
untrained one usually does not. The grids are coarse (9x9) so they print.

    python demos/landscape.py
"""

import numpy as np

from fgsmsdi import Architecture, TargetNet, TrainConfig, export_landscape, init_params, synth_dataset, train


def show(title, grid):
    print(title)
    for row in grid.values:
        print(" ".join(f"{v:5.2f}" for v in row))
    print()


def main():
    cfg = TrainConfig(method="fgsm-sdi", epochs=5, train_size=600, test_size=100).resolved()
    tr = synth_dataset(cfg.classes, cfg.train_size, cfg.dims, cfg.noise, cfg.data_seed, "train")
    te = synth_dataset(cfg.classes, cfg.test_size, cfg.dims, cfg.noise, cfg.data_seed, "test")
    x, y = te.images[:50], te.labels[:50]

    fresh = TargetNet(Architecture(image_shape=cfg.dims, num_classes=cfg.classes))
    init_params(fresh, 0)
    show("untrained", export_landscape(fresh, x, y, cfg.epsilon, resolution=9))

    res = train(cfg, tr, te)
    grid = export_landscape(res.target, x, y, cfg.epsilon, resolution=9)
    show("after 5 epochs of fgsm-sdi", grid)
    print("rows step along sign(grad), columns along a random sign direction")
    print(f"loss range {np.ptp(grid.values):.3f}")


if __name__ == "__main__":
    main()
