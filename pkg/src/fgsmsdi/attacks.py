"""L-infinity gradient attacks: FGSM, FGSM with random start, and PGD.

Perturbations are plain arrays shaped like the image batch. Every routine
returns a ``delta`` inside the epsilon ball and, when ``clip_to_valid`` is on,
with ``x + delta`` inside ``[0, 1]``.
"""

from __future__ import annotations

import re
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .models import Module
from .tensor import Tensor

DEFAULT_EPSILON = 8 / 255
RS_ALPHA_FACTOR = 1.25


class NonFiniteLossError(FloatingPointError):
    """The loss became NaN or infinite while building an attack."""

    def __init__(self, message: str, batch_index: Optional[int] = None, epoch: Optional[int] = None):
        ctx = []
        if epoch is not None:
            ctx.append(f"epoch {epoch}")
        if batch_index is not None:
            ctx.append(f"batch {batch_index}")
        super().__init__(message + (f" ({', '.join(ctx)})" if ctx else ""))
        self.batch_index = batch_index
        self.epoch = epoch


@dataclass(frozen=True)
class AttackConfig:
    """Threat model and step schedule for one attack.

    ``alpha=None`` means "use the routine's default step size".
    """

    epsilon: float = DEFAULT_EPSILON
    alpha: Optional[float] = None
    steps: int = 1
    clip_to_valid: bool = True
    random_start: bool = False
    restarts: int = 1

    def __post_init__(self):
        if not 0 <= self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")

    def step_size(self, default_factor: float) -> float:
        return self.alpha if self.alpha is not None else default_factor * self.epsilon


def pgd_default_alpha_factor(steps: int) -> float:
    """``alpha / epsilon`` when unspecified: 1 for a single step, 1/2 for two, else 1/4."""
    if steps == 1:
        return 1.0
    if steps == 2:
        return 0.5
    return 0.25


class GradCounter:
    """Counts calls to :func:`input_gradient`, i.e. backward passes w.r.t. the input."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


grad_counter = GradCounter()


@contextmanager
def frozen(net: Module):
    """Temporarily exclude ``net``'s parameters from gradient tracking."""
    flags = [p.requires_grad for p in net.parameters()]
    net.requires_grad_(False)
    try:
        yield net
    finally:
        for p, f in zip(net.parameters(), flags):
            p.requires_grad = f


def check_finite(loss: float, batch_index: Optional[int] = None, what: str = "loss") -> None:
    if not np.isfinite(loss):
        raise NonFiniteLossError(f"non-finite {what}: {loss}", batch_index)


def input_gradient(net: Module, x: np.ndarray, y: np.ndarray,
                   batch_index: Optional[int] = None) -> Tuple[np.ndarray, float]:
    """``(grad_x L(f(x), y), L)``; parameter grads are left untouched."""
    grad_counter.count += 1
    xt = Tensor(x, requires_grad=True)
    with frozen(net):
        loss = T.softmax_cross_entropy(net(xt), y)
        check_finite(loss.item(), batch_index)
        T.backward(loss)
    return xt.grad, loss.item()


def project_linf(delta, epsilon: float):
    """Clamp every coordinate of ``delta`` to ``[-epsilon, epsilon]``.

    Accepts an array or a :class:`Tensor`; tensors keep their gradient path.
    """
    if isinstance(delta, Tensor):
        return T.clamp(delta, -epsilon, epsilon)
    delta = np.asarray(delta)
    e = delta.dtype.type(epsilon)
    return np.minimum(np.maximum(delta, -e), e)


def constrain(x: np.ndarray, delta, epsilon: float, clip_to_valid: bool):
    """Apply the valid-range clip (if on) and then the ball projection.

    Re-projecting after ``clamp(x + delta, 0, 1) - x`` keeps the ball exact to the last bit.
    """
    if not clip_to_valid:
        return project_linf(delta, epsilon)
    if isinstance(delta, Tensor):
        xt = T.as_tensor(x, like=delta)
        return T.clamp(T.sub(T.clamp(T.add(xt, delta), 0.0, 1.0), xt), -epsilon, epsilon)
    x = np.asarray(x, dtype=delta.dtype)
    return project_linf(np.clip(x + delta, 0, 1) - x, epsilon)


def fgsm(net: Module, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         batch_index: Optional[int] = None) -> np.ndarray:
    """``delta = epsilon * sign(grad_x L)``; ``cfg.alpha`` and ``cfg.steps`` are ignored."""
    g, _ = input_gradient(net, x, y, batch_index)
    delta = x.dtype.type(cfg.epsilon) * np.sign(g)
    return constrain(x, delta, cfg.epsilon, cfg.clip_to_valid)


def uniform_init(rng: np.random.Generator, x: np.ndarray, epsilon: float) -> np.ndarray:
    return rng.uniform(-epsilon, epsilon, size=x.shape).astype(x.dtype)


def fgsm_rs(net: Module, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
            rng: np.random.Generator, init: Optional[np.ndarray] = None,
            batch_index: Optional[int] = None) -> np.ndarray:
    """FGSM from a uniform random start, step ``alpha`` (default ``1.25 * epsilon``).

    ``init`` replaces the random draw (no RNG is consumed then).
    """
    alpha = x.dtype.type(cfg.step_size(RS_ALPHA_FACTOR))
    eta = uniform_init(rng, x, cfg.epsilon) if init is None else np.asarray(init, x.dtype)
    eta = constrain(x, eta, cfg.epsilon, cfg.clip_to_valid)
    g, _ = input_gradient(net, x + eta, y, batch_index)
    delta = project_linf(eta + alpha * np.sign(g), cfg.epsilon)
    return constrain(x, delta, cfg.epsilon, cfg.clip_to_valid)


def pgd(net: Module, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        init: Optional[np.ndarray] = None, rng: Optional[np.random.Generator] = None,
        batch_index: Optional[int] = None, return_history: bool = False):
    """``cfg.steps`` projected signed-gradient ascent steps.

    Starts from ``init``, else from a uniform draw when ``cfg.random_start``,
    else from zero. With ``return_history`` the iterates ``delta_0..delta_T``
    are returned as a list.
    """
    alpha = x.dtype.type(cfg.step_size(pgd_default_alpha_factor(cfg.steps)))
    if init is not None:
        delta = np.asarray(init, x.dtype)
    elif cfg.random_start:
        if rng is None:
            raise ValueError("pgd: random_start requires an rng")
        delta = uniform_init(rng, x, cfg.epsilon)
    else:
        delta = np.zeros_like(x)
    delta = constrain(x, delta, cfg.epsilon, cfg.clip_to_valid)
    history = [delta]
    for _ in range(cfg.steps):
        g, _ = input_gradient(net, x + delta, y, batch_index)
        delta = project_linf(delta + alpha * np.sign(g), cfg.epsilon)
        delta = constrain(x, delta, cfg.epsilon, cfg.clip_to_valid)
        history.append(delta)
    return history if return_history else delta


# ---------------------------------------------------------------------------
# evaluation


def per_sample_loss(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(len(y)), y]


def predict_logits(net: Module, x: np.ndarray) -> np.ndarray:
    with frozen(net):
        return net(Tensor(x)).data


def parse_attack(name: str, epsilon: float = DEFAULT_EPSILON) -> Tuple[str, Optional[AttackConfig]]:
    """Map ``clean``, ``fgsm`` or ``pgdN`` to an :class:`AttackConfig`.

    Evaluation PGD takes one random start and ``alpha = epsilon / 4``
    (2/255 at the default radius).
    """
    name = name.strip().lower()
    if name == "clean":
        return name, None
    if name == "fgsm":
        return name, AttackConfig(epsilon=epsilon, steps=1)
    m = re.fullmatch(r"pgd-?(\d+)", name)
    if m:
        steps = int(m.group(1))
        return f"pgd{steps}", AttackConfig(epsilon=epsilon, alpha=epsilon / 4 if epsilon > 0 else None,
                                           steps=steps, random_start=True)
    raise ValueError(f"unknown attack {name!r}; expected clean, fgsm or pgdN")


def attack_batch(net: Module, x: np.ndarray, y: np.ndarray, name: str, cfg: Optional[AttackConfig],
                 rng: np.random.Generator, batch_index: Optional[int] = None) -> np.ndarray:
    """Adversarial inputs for one batch; with restarts, keep the worst case per sample."""
    if cfg is None or cfg.epsilon == 0:
        return x
    if name == "fgsm":
        return x + fgsm(net, x, y, cfg, batch_index)
    best_x, best_loss = None, None
    for _ in range(cfg.restarts):
        x_adv = x + pgd(net, x, y, cfg, rng=rng, batch_index=batch_index)
        loss = per_sample_loss(predict_logits(net, x_adv), y)
        if best_x is None:
            best_x, best_loss = x_adv, loss
        else:
            better = loss > best_loss
            best_x = np.where(better[:, None, None, None], x_adv, best_x)
            best_loss = np.where(better, loss, best_loss)
    return best_x


def evaluate_robust_accuracy(net: Module, images: np.ndarray, labels: np.ndarray,
                             attacks: Iterable[Union[str, Tuple[str, Optional[AttackConfig]]]] = ("clean",),
                             epsilon: float = DEFAULT_EPSILON, batch_size: int = 100,
                             rng: Optional[np.random.Generator] = None,
                             return_loss: bool = False) -> Dict[str, float]:
    """Fraction of examples still classified correctly under each attack.

    The network is switched to eval mode for the duration and restored after,
    so parameters and BN running statistics are left untouched. With
    ``return_loss`` the values are ``(accuracy, mean loss)`` pairs.
    """
    if len(images) == 0:
        raise ValueError("evaluate_robust_accuracy: empty dataset")
    rng = rng if rng is not None else np.random.default_rng(0)
    specs = [parse_attack(a, epsilon) if isinstance(a, str) else a for a in attacks]
    was_training = net.training
    net.eval()
    try:
        results = {}
        for name, cfg in specs:
            correct, total_loss = 0, 0.0
            for b, start in enumerate(range(0, len(images), batch_size)):
                x = images[start:start + batch_size]
                y = labels[start:start + batch_size]
                x_adv = attack_batch(net, x, y, name, cfg, rng, b)
                logits = predict_logits(net, x_adv)
                correct += int((logits.argmax(axis=1) == y).sum())
                total_loss += float(per_sample_loss(logits.astype(np.float64), y).sum())
            acc = correct / len(images)
            results[name] = (acc, total_loss / len(images)) if return_loss else acc
        return results
    finally:
        net.train(was_training)
