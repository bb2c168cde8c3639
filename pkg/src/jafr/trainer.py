"""Training loop: cross-entropy plus the Jacobian frequency term, optionally on
adversarial inputs.

One optimisation step does, in order: classification loss at the (possibly
attacked) inputs; per-sample input gradients ``J`` kept in the graph;
channel-averaged magnitude spectra of ``J``; ``L_freq = -log B_low`` averaged
over the batch; an SGD step on ``L_cls + lambda_freq * L_freq``.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attacks import AT_MODES, AttackConfig, attack_batch
from .autodiff import ContractViolation, Tensor
from .data import Dataset
from .freqbias import BiasConfig, log_bias_low
from .models import Model, ModelSpec, cross_entropy, one_hot, predict
from .spectral import channel_mean_spectrum

log = logging.getLogger(__name__)


class NumericalAbort(RuntimeError):
    """A non-finite value appeared during training."""


@dataclass
class TrainConfig:
    lambda_freq: float = 0.0
    lr: float = 0.05
    momentum: float = 0.9
    at_mode: str = "none"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(
        epsilon=8 / 255, step=2 / 255, iters=10, restarts=1))
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    lr_schedule: str = "constant"  # or "linear-warmup-decay"
    warmup_frac: float = 0.2
    bias: BiasConfig = field(default_factory=BiasConfig)
    grad_clip: float = 10.0
    log_bias: bool = True

    def __post_init__(self):
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if isinstance(self.bias, dict):
            self.bias = BiasConfig(**self.bias)
        if not self.lr > 0:
            raise ContractViolation("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be >= 1")
        if self.at_mode not in AT_MODES:
            raise ContractViolation(f"unknown at_mode {self.at_mode!r}")
        if self.lr_schedule not in ("constant", "linear-warmup-decay"):
            raise ContractViolation(f"unknown lr_schedule {self.lr_schedule!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bias"]["index_mode"] = self.bias.index_mode.value
        return d


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss_cls: float
    loss_freq: float
    bias_low: float
    lr: float
    clipped: bool


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)
    epoch_acc: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss_cls", "loss_freq", "bias_low", "lr", "clipped"])
            for r in self.steps:
                w.writerow([r.step, r.epoch, repr(r.loss_cls), repr(r.loss_freq), repr(r.bias_low),
                            repr(r.lr), int(r.clipped)])

    def write_epoch_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_acc"])
            for i, a in enumerate(self.epoch_acc):
                w.writerow([i, repr(a)])


class SGD:
    """Plain SGD with optional heavy-ball momentum and global-norm clipping."""

    def __init__(self, params: list[Tensor], momentum: float = 0.0, clip: float | None = None):
        self.params = params
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, grads: list[np.ndarray], lr: float) -> bool:
        clipped = False
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
                clipped = True
        for p, v, g in zip(self.params, self.velocity, grads):
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p.data = p.data - lr * g
        return clipped


def frequency_terms(J: Tensor, cfg: BiasConfig) -> tuple[Tensor, Tensor]:
    """Per-sample ``log B_low`` of ``|F(J)|`` and the batch-mean frequency loss."""
    logb = log_bias_low(channel_mean_spectrum(J), cfg)
    return logb, ad.neg(ad.mean(logb))


def jafr_step(model: Model, x: np.ndarray, y: np.ndarray, cfg: TrainConfig, opt: SGD,
              lr: float, rng: np.random.Generator, step: int = 0, epoch: int = 0) -> StepRecord:
    """One optimisation step on a batch; returns its log record."""
    x_used = attack_batch(model, x, y, cfg.at_mode, cfg.attack, rng)
    xt = Tensor(x_used, requires_grad=True)
    logits = model(xt)
    per = cross_entropy(logits, y, reduction="none")
    loss_cls = ad.mean(per)
    if cfg.lambda_freq != 0.0:
        J = ad.grad(ad.tsum(per), xt, create_graph=True)
        logb, loss_freq = frequency_terms(J, cfg.bias)
        total = ad.add(loss_cls, ad.mul(cfg.lambda_freq, loss_freq))
        lf, bl = loss_freq.item(), float(np.mean(np.exp(logb.data)))
    else:
        total = loss_cls
        lf = bl = float("nan")
        if cfg.log_bias:
            J = ad.grad(ad.tsum(per), xt)
            with ad.no_grad():
                logb, loss_freq = frequency_terms(J, cfg.bias)
            lf, bl = loss_freq.item(), float(np.mean(np.exp(logb.data)))
    grads = ad.grad(total, model.params)
    gdata = [g.data for g in grads]
    if not (np.isfinite(total.data).all() and all(np.isfinite(g).all() for g in gdata)):
        spec = channel_mean_spectrum(ad.detach(J)).mags.data if cfg.lambda_freq != 0.0 else None
        finite = spec[np.isfinite(spec)] if spec is not None else np.zeros(0)
        dump = {"step": step, "loss_cls": loss_cls.item(), "loss_freq": lf,
                "spectrum_min": float(finite.min()) if finite.size else None,
                "spectrum_max": float(finite.max()) if finite.size else None,
                "spectrum_nonfinite": None if spec is None else int(spec.size - finite.size)}
        raise NumericalAbort("non-finite loss or gradient: " + json.dumps(dump))
    clipped = opt.step(gdata, lr)
    if clipped:
        log.info("step %d: gradient clipped to norm %g", step, opt.clip)
    return StepRecord(step, epoch, loss_cls.item(), lf, bl, lr, clipped)


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    warm = max(int(cfg.warmup_frac * total), 1)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    return cfg.lr * max(total - step, 0) / max(total - warm, 1)


def train(spec: ModelSpec, data: Dataset, cfg: TrainConfig, model: Model | None = None) -> tuple[Model, TrainLog]:
    """Train a fresh model (or continue ``model``) on ``data`` with ``cfg``."""
    if data.image_shape != spec.input_shape:
        raise ContractViolation(f"dataset images {data.image_shape} do not match model input {spec.input_shape}")
    if data.num_classes != spec.num_classes:
        raise ContractViolation("dataset and model disagree on the number of classes")
    model = model if model is not None else Model(spec, seed=cfg.seed)
    opt = SGD(model.params, momentum=cfg.momentum, clip=cfg.grad_clip)
    rng = np.random.default_rng([cfg.seed, 1])
    y_all = one_hot(data.labels, spec.num_classes)
    n = len(data)
    per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total = per_epoch * cfg.epochs
    out = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            rec = jafr_step(model, data.images[idx], y_all[idx], cfg, opt, lr_at(cfg, step, total),
                            rng, step, epoch)
            out.steps.append(rec)
            step += 1
        acc = float(np.mean(predict(model, data.images) == data.labels))
        out.epoch_acc.append(acc)
        log.info("epoch %d: train acc %.4f", epoch, acc)
    return model, out
