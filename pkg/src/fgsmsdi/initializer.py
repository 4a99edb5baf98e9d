"""Sample-dependent adversarial initialization.

A generator looks at each image together with the sign of its loss gradient
and proposes a starting point inside the epsilon ball; one FGSM step from that
point gives the training perturbation. The generator is trained to *increase*
the target's loss on the resulting adversarial examples while the target is
trained to decrease it.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, NonFiniteLossError, constrain, frozen, input_gradient
from .models import GeneratorNet, Module
from .optim import SGD
from .tensor import Tensor

SDI_ALPHA_FACTOR = 1.0


def signed_gradient(net: Module, x: np.ndarray, y: np.ndarray,
                    batch_index: Optional[int] = None) -> np.ndarray:
    """``sign(grad_x L(f(x), y))`` with entries in ``{-1, 0, 1}``."""
    g, _ = input_gradient(net, x, y, batch_index)
    return np.sign(g)


def generate_init(gen: GeneratorNet, x: np.ndarray, s_x: np.ndarray, epsilon: float) -> Tensor:
    """``epsilon * g(x, s_x)``, differentiable with respect to the generator's parameters."""
    out = gen(T.as_tensor(np.asarray(x)), T.as_tensor(np.asarray(s_x, dtype=x.dtype)))
    return T.scale(out, epsilon)


def sdi_perturbation(net: Module, gen: GeneratorNet, x: np.ndarray, y: np.ndarray,
                     cfg: AttackConfig, s_x: Optional[np.ndarray] = None,
                     batch_index: Optional[int] = None) -> Tensor:
    """One FGSM step from the generated initialization, then projection.

    ``delta = clip(eta_g + alpha * sign(grad_x L(f(x + eta_g))))`` where the sign
    term is a constant: gradients w.r.t. the generator flow only through the
    additive ``eta_g`` path and the unclipped coordinates. ``alpha`` defaults
    to ``epsilon``. Pass ``s_x`` to reuse an already computed signed gradient.
    """
    if s_x is None:
        s_x = signed_gradient(net, x, y, batch_index)
    eta = generate_init(gen, x, s_x, cfg.epsilon)
    alpha = cfg.step_size(SDI_ALPHA_FACTOR)
    g, _ = input_gradient(net, x + eta.data, y, batch_index)
    step = np.sign(g) * x.dtype.type(alpha)
    delta = T.clamp(T.add(eta, step), -cfg.epsilon, cfg.epsilon)
    return constrain(x, delta, cfg.epsilon, cfg.clip_to_valid)


def adversarial_loss(net: Module, x: np.ndarray, y: np.ndarray, delta: Tensor) -> Tensor:
    """``L(f(x + delta), y)``; gradients reach the target only if its parameters require them."""
    return T.softmax_cross_entropy(net(T.add(T.as_tensor(x, like=delta), delta)), y)


def generator_ascent_step(gen: GeneratorNet, net: Module, x: np.ndarray, y: np.ndarray,
                          cfg: AttackConfig, opt: SGD, s_x: Optional[np.ndarray] = None,
                          batch_index: Optional[int] = None) -> float:
    """Build a fresh ``delta_g`` and move the generator up the target's loss.

    The target network is only read. Returns the loss before the update.
    """
    if not opt.maximize:
        raise ValueError("generator optimizer must be configured for ascent (maximize=True)")
    gen.zero_grad()
    delta = sdi_perturbation(net, gen, x, y, cfg, s_x=s_x, batch_index=batch_index)
    with frozen(net):
        loss = adversarial_loss(net, x, y, delta)
        if not np.isfinite(loss.item()):
            raise NonFiniteLossError(f"non-finite generator loss: {loss.item()}", batch_index)
        T.backward(loss)
    opt.step(gen.parameters())
    return loss.item()
