"""L-infinity FGSM / PGD attacks and the adversarial-training inner step.

Attacks only ever use the classification loss; the frequency regulariser is
a training-time term and plays no part in crafting perturbations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .models import Model, cross_entropy

AT_MODES = ("none", "fgsm", "pgd")


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step: float = 2 / 255
    iters: int = 50
    restarts: int = 10
    random_init: bool = True
    # step along +sign(grad) to raise the loss; False steps downhill instead
    ascend: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ContractViolation("epsilon must lie in [0, 1]")
        if not 0.0 <= self.step <= self.epsilon:
            raise ContractViolation("step must satisfy 0 <= step <= epsilon")
        if self.iters < 1 or self.restarts < 1:
            raise ContractViolation("iters and restarts must be >= 1")

    @classmethod
    def evaluation(cls, epsilon: float = 8 / 255) -> "AttackConfig":
        """50 iterations, 10 random restarts, step epsilon / 4."""
        return cls(epsilon=epsilon, step=epsilon / 4, iters=50, restarts=10, random_init=True)


def loss_and_input_grad(model: Model, x: np.ndarray, y: np.ndarray):
    """Per-sample losses, logits and the gradient of the summed loss w.r.t. ``x``."""
    xt = Tensor(x, requires_grad=True)
    with model.frozen():
        logits = model(xt)
        per = cross_entropy(logits, y, reduction="none")
        g = ad.grad(ad.tsum(per), xt)
    return per.data, logits.data, g.data


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """``clip(x + epsilon * sign(grad_x L), 0, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    _, _, g = loss_and_input_grad(model, x, y)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0)


def pgd(model: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        rng: np.random.Generator | None = None) -> np.ndarray:
    """Projected sign-gradient attack with restarts.

    Per sample, the first restart that flips the prediction is kept and the
    sample is not attacked again; otherwise the restart with the largest final
    loss wins (earliest restart on ties).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(0)
    eps, eta = cfg.epsilon, cfg.step
    sign = 1.0 if cfg.ascend else -1.0
    labels = y.argmax(axis=-1)
    best = x.copy()
    best_loss = np.full(len(x), -np.inf)
    done = np.zeros(len(x), dtype=bool)
    for _ in range(cfg.restarts):
        # samples already flipped by an earlier restart are final
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        xs, ys = x[todo], y[todo]
        if cfg.random_init:
            delta = rng.uniform(-eps, eps, size=xs.shape)
            x_adv = np.clip(xs + delta, 0.0, 1.0)
            delta = x_adv - xs
        else:
            delta = np.zeros_like(xs)
            x_adv = xs
        for _ in range(cfg.iters):
            _, _, g = loss_and_input_grad(model, x_adv, ys)
            delta = np.clip(delta + sign * eta * np.sign(g), -eps, eps)
            x_adv = np.clip(xs + delta, 0.0, 1.0)
            delta = x_adv - xs
        loss, logits, _ = loss_and_input_grad(model, x_adv, ys)
        wrong = logits.argmax(axis=-1) != labels[todo]
        better = loss > best_loss[todo]
        take = wrong | better
        best[todo[take]] = x_adv[take]
        best_loss[todo[take]] = loss[take]
        done[todo[wrong]] = True
    return best


def attack_batch(model: Model, x: np.ndarray, y: np.ndarray, mode: str, cfg: AttackConfig,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    if mode == "none":
        return np.asarray(x, dtype=np.float64)
    if mode == "fgsm":
        return fgsm(model, x, y, cfg.epsilon)
    if mode == "pgd":
        return pgd(model, x, y, cfg, rng)
    raise ContractViolation(f"unknown attack mode {mode!r}")


def adversarial_train_step(model: Model, x: np.ndarray, y: np.ndarray, at_mode: str,
                           cfg: AttackConfig, rng: np.random.Generator | None = None) -> tuple[Tensor, np.ndarray]:
    """Classification loss evaluated at attacked inputs.

    Returns ``(loss, x_used)``; the loss is a graph node over the model
    parameters, ``x_used`` the (possibly adversarial) inputs it was taken at.
    """
    if at_mode not in AT_MODES:
        raise ContractViolation(f"unknown adversarial training mode {at_mode!r}")
    x_used = attack_batch(model, x, y, at_mode, cfg, rng)
    return cross_entropy(model(Tensor(x_used)), y), x_used
