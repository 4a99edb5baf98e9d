"""2-D loss-landscape slices around a batch of clean inputs.

The slice is spanned by an adversarial direction ``r1 = eps * sign(grad_x L)``
and a Rademacher direction ``r2`` with independent ``+-eps`` entries; grid
point ``(a, b)`` holds the mean cross-entropy at ``x + a * r1 + b * r2`` for
``a, b`` evenly spaced in ``[-1, 1]``. Rows index ``a``, columns ``b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .attacks import frozen, input_gradient, per_sample_loss, predict_logits
from .models import Module


@dataclass
class LandscapeGrid:
    values: np.ndarray  # [resolution, resolution]
    coords: np.ndarray  # [resolution], shared by both axes
    epsilon: float
    r1: np.ndarray
    r2: np.ndarray

    @property
    def resolution(self) -> int:
        return len(self.coords)

    @property
    def origin(self) -> float:
        c = self.resolution // 2
        return float(self.values[c, c])


def grid_coords(resolution: int) -> np.ndarray:
    if resolution < 1 or resolution % 2 == 0:
        raise ValueError(f"resolution must be a positive odd number, got {resolution}")
    half = resolution // 2
    if half == 0:
        return np.zeros(1)
    return (np.arange(resolution) - half) / half


def export_landscape(net: Module, x: np.ndarray, y: np.ndarray, epsilon: float,
                     resolution: int = 21, seed: int = 0,
                     path: Optional[Union[str, Path]] = None) -> LandscapeGrid:
    """Evaluate the loss over the (r1, r2) grid; optionally write it as a text grid."""
    coords = grid_coords(resolution)
    was_training = net.training
    net.eval()
    try:
        g, _ = input_gradient(net, x, y)
        r1 = x.dtype.type(epsilon) * np.sign(g)
        rng = np.random.default_rng(seed)
        r2 = (x.dtype.type(epsilon) * rng.choice(np.array([-1.0, 1.0]), size=x.shape)).astype(x.dtype)
        values = np.empty((resolution, resolution))
        with frozen(net):
            for i, a in enumerate(coords):
                for j, b in enumerate(coords):
                    xs = x + x.dtype.type(a) * r1 + x.dtype.type(b) * r2
                    values[i, j] = per_sample_loss(predict_logits(net, xs).astype(np.float64), y).mean()
    finally:
        net.train(was_training)
    grid = LandscapeGrid(values, coords, float(epsilon), r1, r2)
    if path is not None:
        write_landscape(path, grid)
    return grid


def write_landscape(path: Union[str, Path], grid: LandscapeGrid) -> None:
    lines = [f"resolution {grid.resolution} epsilon {grid.epsilon!r}"]
    lines += [" ".join(repr(float(v)) for v in row) for row in grid.values]
    Path(path).write_text("\n".join(lines) + "\n")


def read_landscape(path: Union[str, Path]) -> tuple[np.ndarray, float]:
    """Returns ``(values, epsilon)`` from a grid file."""
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if len(head) != 4 or head[0] != "resolution" or head[2] != "epsilon":
        raise ValueError(f"{path}: malformed landscape header {lines[0]!r}")
    res, eps = int(head[1]), float(head[3])
    values = np.array([[float(v) for v in line.split()] for line in lines[1:1 + res]])
    if values.shape != (res, res):
        raise ValueError(f"{path}: expected a {res}x{res} grid, got {values.shape}")
    return values, eps
