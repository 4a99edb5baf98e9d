"""Adversarial training loops, learning-rate schedules and run bookkeeping.

Methods:

* ``pgd-at``   -- T-step PGD from zero (default T=10, alpha=eps/4)
* ``pgd2-at``  -- PGD with T=2, alpha=eps/2
* ``pgd4-at``  -- PGD with T=4, alpha=eps/4
* ``fgsm-at``  -- plain FGSM, no initialization
* ``fgsm-rs``  -- FGSM from a uniform random start, alpha=1.25*eps
* ``fgsm-sdi`` -- FGSM from a generated, sample-dependent start; the generator
  is updated (ascent) on every k-th batch
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .attacks import (
    DEFAULT_EPSILON,
    RS_ALPHA_FACTOR,
    AttackConfig,
    NonFiniteLossError,
    evaluate_robust_accuracy,
    fgsm,
    fgsm_rs,
    frozen,
    grad_counter,
    pgd,
)
from .data import DEFAULT_NOISE, Dataset
from .initializer import SDI_ALPHA_FACTOR, generator_ascent_step, sdi_perturbation, signed_gradient
from .metrics import MetricsRecord
from .models import Architecture, GeneratorNet, TargetNet, bundle_state, init_params
from .optim import SGD

logger = logging.getLogger(__name__)

METHODS = ("pgd-at", "fgsm-at", "fgsm-rs", "fgsm-sdi", "pgd2-at", "pgd4-at")
SCHEDULES = ("multistep", "cyclic")

# (steps, alpha / epsilon) used when the config leaves them unset
_METHOD_DEFAULTS = {
    "pgd-at": (10, 0.25),
    "pgd2-at": (2, 0.5),
    "pgd4-at": (4, 0.25),
    "fgsm-at": (1, 1.0),
    "fgsm-rs": (1, RS_ALPHA_FACTOR),
    "fgsm-sdi": (1, SDI_ALPHA_FACTOR),
}

# 110-epoch protocol with decays at epochs 100 and 105
_REFERENCE_EPOCHS = 110
_REFERENCE_MILESTONES = (100, 105)


class ConfigError(ValueError):
    """A training configuration is inconsistent or incomplete."""


@dataclass(frozen=True)
class TrainConfig:
    method: str = "fgsm-sdi"
    epochs: int = 20
    k: int = 20
    epsilon: float = DEFAULT_EPSILON
    alpha: Optional[float] = None
    steps: Optional[int] = None
    clip_to_valid: bool = True
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "multistep"
    milestones: Optional[Tuple[int, ...]] = None
    lr_factor: float = 0.1
    max_lr: float = 0.2
    gen_lr: float = 0.1
    gen_momentum: float = 0.9
    gen_hidden: int = 64
    arch: str = "cnn"
    seed: int = 0
    batch_size: int = 50
    eval_subset: int = 100
    eval_steps: int = 10
    overfit_drop: float = 0.30
    overfit_floor: float = 0.05
    dataset: str = "synthetic"
    classes: int = 10
    train_size: int = 2000
    test_size: int = 500
    dims: Tuple[int, int, int] = (3, 16, 16)
    noise: float = DEFAULT_NOISE
    data_seed: int = 0

    def resolved(self) -> "TrainConfig":
        """Fill method-dependent defaults and validate; idempotent."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}; choose from {', '.join(SCHEDULES)}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        steps, factor = _METHOD_DEFAULTS[self.method]
        if self.method in ("pgd2-at", "pgd4-at", "fgsm-at", "fgsm-rs", "fgsm-sdi"):
            if self.steps not in (None, steps):
                raise ConfigError(f"{self.method} uses exactly {steps} step(s), got {self.steps}")
        else:
            steps = self.steps if self.steps is not None else steps
        alpha = self.alpha if self.alpha is not None else factor * self.epsilon
        milestones = self.milestones
        if self.schedule == "multistep":
            if milestones is None:
                milestones = default_milestones(self.epochs)
            milestones = tuple(int(m) for m in milestones)
            if any(b <= a for a, b in zip(milestones, milestones[1:])):
                raise ConfigError(f"milestones must be strictly increasing, got {milestones}")
            if milestones and (milestones[0] < 1 or milestones[-1] >= self.epochs):
                raise ConfigError(f"milestones must lie in [1, {self.epochs}), got {milestones}")
        try:
            AttackConfig(self.epsilon, alpha if alpha > 0 else None, steps, self.clip_to_valid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return dataclasses.replace(self, steps=steps, alpha=alpha, milestones=milestones,
                                   dims=tuple(int(d) for d in self.dims))

    def attack(self) -> AttackConfig:
        cfg = self.resolved()
        return AttackConfig(epsilon=cfg.epsilon, alpha=cfg.alpha or None, steps=cfg.steps,
                            clip_to_valid=cfg.clip_to_valid)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        if self.milestones is not None:
            d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if d.get("dims") is not None:
            d["dims"] = tuple(d["dims"])
        if d.get("milestones") is not None:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


def default_milestones(epochs: int) -> Tuple[int, ...]:
    """The 100/105-of-110 decay points, rescaled to ``epochs``."""
    scaled = sorted({round(m * epochs / _REFERENCE_EPOCHS) for m in _REFERENCE_MILESTONES})
    return tuple(m for m in scaled if 1 <= m < epochs)


# ---------------------------------------------------------------------------
# schedules


def multistep_lr(epoch: int, base_lr: float, milestones: Sequence[int], factor: float = 0.1) -> float:
    """``base_lr * factor ** (number of milestones <= epoch)``; epochs count from 1."""
    return base_lr * factor ** int(np.sum(np.asarray(milestones) <= epoch))


def cyclic_lr(step: int, total_steps: int, max_lr: float) -> float:
    """Triangle rising from 0 at step 0 to ``max_lr`` at the midpoint and back to 0."""
    if total_steps <= 0:
        return 0.0
    frac = min(max(step / total_steps, 0.0), 1.0)
    return max_lr * (1.0 - abs(2.0 * frac - 1.0))


def lr_schedule(cfg: TrainConfig, epoch: int, step: int = 0, total_steps: int = 1) -> float:
    """Learning rate for 1-based ``epoch`` (multistep) or global ``step`` (cyclic)."""
    if cfg.schedule == "cyclic":
        return cyclic_lr(step, total_steps, cfg.max_lr)
    return multistep_lr(epoch, cfg.lr, cfg.resolved().milestones, cfg.lr_factor)


# ---------------------------------------------------------------------------
# bookkeeping


def monitor_overfit(history: Sequence[float], drop: float = 0.30, floor: float = 0.05) -> Optional[int]:
    """First 1-based epoch whose accuracy is both ``drop`` below the best so far and under ``floor``."""
    best = -np.inf
    for epoch, acc in enumerate(history, start=1):
        if epoch > 1 and acc < best - drop and acc < floor:
            return epoch
        best = max(best, acc)
    return None


@dataclass
class OverfitMonitor:
    drop: float = 0.30
    floor: float = 0.05
    history: List[float] = field(default_factory=list)
    triggered_epoch: Optional[int] = None

    def update(self, accuracy: float) -> Optional[int]:
        """Record one epoch; returns the trigger epoch the first time it fires."""
        self.history.append(accuracy)
        if self.triggered_epoch is None:
            hit = monitor_overfit(self.history, self.drop, self.floor)
            if hit is not None:
                self.triggered_epoch = hit
                return hit
        return None


def select_best_checkpoint(records: Sequence[MetricsRecord], attack: str = "pgd10") -> Tuple[int, int]:
    """``(best_epoch, last_epoch)`` by test accuracy under ``attack``; ties go to the earlier epoch."""
    rows = [r for r in records if r.split == "test" and r.attack == attack]
    if not rows:
        raise ValueError(f"no evaluated epochs for test/{attack}")
    best = max(rows, key=lambda r: (r.accuracy, -r.epoch))
    return best.epoch, max(r.epoch for r in rows)


# ---------------------------------------------------------------------------
# trainer


@dataclass
class TrainResult:
    config: TrainConfig
    target: TargetNet
    generator: Optional[GeneratorNet]
    records: List[MetricsRecord]
    best_epoch: int
    last_epoch: int
    best_state: Dict[str, np.ndarray]
    last_state: Dict[str, np.ndarray]
    overfit_epoch: Optional[int]


class Trainer:
    """Owns one run: both networks, their optimizers and every RNG stream.

    All randomness derives from ``cfg.seed``, so a fixed config reproduces
    bit-identical parameters on one platform.
    """

    def __init__(self, cfg: TrainConfig, train: Dataset, test: Dataset, dtype=np.float32):
        self.cfg = cfg = cfg.resolved()
        self.train_set = train.astype(dtype)
        self.test_set = test.astype(dtype)
        self.attack_cfg = cfg.attack()
        ss = np.random.SeedSequence(cfg.seed)
        init_target, init_gen, shuffle, attack = ss.spawn(4)
        arch = Architecture(kind=cfg.arch, image_shape=train.image_shape,
                            num_classes=train.num_classes)
        self.target = TargetNet(arch, dtype)
        init_params(self.target, np.random.default_rng(init_target))
        self.generator: Optional[GeneratorNet] = None
        if cfg.method == "fgsm-sdi":
            self.generator = GeneratorNet(train.image_shape[0], cfg.gen_hidden, dtype)
            init_params(self.generator, np.random.default_rng(init_gen))
            self.gen_opt = SGD(cfg.gen_lr, cfg.gen_momentum, 0.0, maximize=True)
        self.opt = SGD(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.shuffle_rng = np.random.default_rng(shuffle)
        self.attack_rng = np.random.default_rng(attack)
        self.monitor = OverfitMonitor(cfg.overfit_drop, cfg.overfit_floor)
        self.records: List[MetricsRecord] = []
        self.batches_per_epoch = -(-len(train) // cfg.batch_size)
        self.total_steps = cfg.epochs * self.batches_per_epoch
        self.global_step = 0
        self.epoch = 0
        self.gen_updates = 0
        self.batch_grad_calls: List[int] = []
        self.train_deltas: Optional[List[np.ndarray]] = None
        self._best: Optional[Tuple[int, float, Dict[str, np.ndarray]]] = None

    # -- perturbations -------------------------------------------------------

    def perturb(self, i: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Training perturbation for 1-based batch index ``i`` (may update the generator)."""
        cfg, acfg, net = self.cfg, self.attack_cfg, self.target
        m = cfg.method
        if m == "fgsm-at":
            return fgsm(net, x, y, acfg, batch_index=i)
        if m == "fgsm-rs":
            return fgsm_rs(net, x, y, acfg, self.attack_rng, batch_index=i)
        if m in ("pgd-at", "pgd2-at", "pgd4-at"):
            return pgd(net, x, y, acfg, batch_index=i)
        s_x = signed_gradient(net, x, y, batch_index=i)
        if i % cfg.k == 0:
            generator_ascent_step(self.generator, net, x, y, acfg, self.gen_opt, s_x=s_x,
                                  batch_index=i)
            self.gen_updates += 1
        with frozen(self.generator):
            return sdi_perturbation(net, self.generator, x, y, acfg, s_x=s_x, batch_index=i).data

    # -- one epoch -----------------------------------------------------------

    def train_epoch(self) -> MetricsRecord:
        cfg = self.cfg
        self.epoch += 1
        self.gen_updates = 0
        self.batch_grad_calls = []
        self.target.train()
        if self.generator is not None:
            self.generator.train()
        if cfg.schedule == "multistep":
            self.opt.lr = multistep_lr(self.epoch, cfg.lr, cfg.milestones, cfg.lr_factor)
        t0 = time.perf_counter()
        total_loss, correct, seen = 0.0, 0, 0
        for i, (x, y) in enumerate(self.train_set.batches(cfg.batch_size, self.shuffle_rng), start=1):
            if cfg.schedule == "cyclic":
                self.opt.lr = cyclic_lr(self.global_step + 1, self.total_steps, cfg.max_lr)
            before = grad_counter.count
            try:
                delta = self.perturb(i, x, y)
            except NonFiniteLossError as exc:
                raise NonFiniteLossError(str(exc), batch_index=i, epoch=self.epoch) from None
            self.batch_grad_calls.append(grad_counter.count - before)
            if self.train_deltas is not None:
                self.train_deltas.append((x, delta))

            self.target.zero_grad()
            logits = self.target(T.Tensor(x + delta))
            loss = T.softmax_cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(f"non-finite training loss: {loss.item()}",
                                         batch_index=i, epoch=self.epoch)
            T.backward(loss)
            self.opt.step(self.target.parameters())
            self.global_step += 1
            total_loss += loss.item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(y)
        wall = (time.perf_counter() - t0) * 1000
        return MetricsRecord(self.epoch, "train", cfg.method, correct / seen, total_loss / seen,
                             wall, self.gen_updates)

    def evaluate_epoch(self) -> List[MetricsRecord]:
        """PGD-10 on fixed train/test subsets plus clean test accuracy."""
        cfg = self.cfg
        rng = np.random.default_rng([cfg.seed, self.epoch, 1])
        pgd_name = f"pgd{cfg.eval_steps}"
        rows = []
        for split, ds, attacks in (("train", self.train_set, (pgd_name,)),
                                   ("test", self.test_set, ("clean", pgd_name))):
            sub = ds.subset(cfg.eval_subset)
            for name in attacks:
                t0 = time.perf_counter()
                acc, loss = evaluate_robust_accuracy(self.target, sub.images, sub.labels, [name],
                                                     cfg.epsilon, 100, rng, return_loss=True)[name]
                rows.append(MetricsRecord(self.epoch, split, name, acc, loss,
                                          (time.perf_counter() - t0) * 1000, self.gen_updates))
        return rows

    def state(self) -> Dict[str, np.ndarray]:
        return bundle_state(self.target, self.generator)

    def run(self, on_epoch: Optional[Callable[[List[MetricsRecord]], None]] = None) -> TrainResult:
        cfg = self.cfg
        pgd_name = f"pgd{cfg.eval_steps}"
        for _ in range(cfg.epochs):
            rows = [self.train_epoch()] + self.evaluate_epoch()
            self.records.extend(rows)
            train_pgd = next(r for r in rows if r.split == "train" and r.attack == pgd_name)
            test_pgd = next(r for r in rows if r.split == "test" and r.attack == pgd_name)
            hit = self.monitor.update(train_pgd.accuracy)
            if hit is not None:
                logger.warning("catastrophic overfitting detected at epoch %d", hit)
            if self._best is None or test_pgd.accuracy > self._best[1]:
                self._best = (self.epoch, test_pgd.accuracy, self.state())
            logger.info("epoch %d: train loss %.4f, test %s acc %.3f", self.epoch, rows[0].loss,
                        pgd_name, test_pgd.accuracy)
            if on_epoch is not None:
                on_epoch(rows)
        best_epoch, last_epoch = select_best_checkpoint(self.records, pgd_name)
        return TrainResult(cfg, self.target, self.generator, self.records, best_epoch, last_epoch,
                           self._best[2], self.state(), self.monitor.triggered_epoch)


def train(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, dtype=np.float32) -> TrainResult:
    return Trainer(cfg, train_set, test_set, dtype).run()


def _train_method(method: str):
    def run(cfg: TrainConfig, train_set: Dataset, test_set: Dataset, dtype=np.float32) -> TrainResult:
        if cfg.method != method:
            raise ConfigError(f"expected method {method!r}, got {cfg.method!r}")
        return train(cfg, train_set, test_set, dtype)

    run.__name__ = "train_" + method.replace("-", "_")
    run.__doc__ = f"Train with ``{method}``; ``cfg.method`` must match."
    return run


train_pgd_at = _train_method("pgd-at")
train_pgd2_at = _train_method("pgd2-at")
train_pgd4_at = _train_method("pgd4-at")
train_fgsm_at = _train_method("fgsm-at")
train_fgsm_rs = _train_method("fgsm-rs")
train_fgsm_sdi = _train_method("fgsm-sdi")


def evaluate_checkpoint(state: Dict[str, np.ndarray], arch: Architecture, test: Dataset,
                        attacks: Sequence[str], epsilon: float, seed: int = 0,
                        dtype=np.float32) -> Dict[str, float]:
    """Full attack suite on a saved target state (keys without the ``target.`` prefix)."""
    net = TargetNet(arch, dtype)
    net.load_state_dict(state)
    return evaluate_robust_accuracy(net, test.images.astype(dtype), test.labels, attacks, epsilon,
                                    100, np.random.default_rng(seed))
