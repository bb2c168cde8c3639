"""Low-frequency bias of a Fourier magnitude map and the matching loss.

For an ``h x w`` magnitude map ``M`` with exponent schedules ``a`` (rows)
and ``b`` (columns)::

    bias = sum_j prod_i (M[i, j] + floor) ** a[i]
         + sum_i prod_j (M[i, j] + floor) ** b[j]

Both schedules decrease evenly from +1 at the DC index to -1 at the last
index and sum to zero, which makes ``bias`` invariant to rescaling ``M``.
Products are evaluated as ``exp(sum(a * log(M + floor)))`` and the outer
sum with a log-sum-exp, so ``loss_freq = -log(bias)`` never overflows.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor
from .spectral import SpectrumMap, channel_mean_spectrum


class IndexMode(str, enum.Enum):
    RAW_DFT = "raw-dft"
    FOLDED = "folded-frequency"


@dataclass(frozen=True)
class AlphaSchedule:
    alphas: np.ndarray
    spacing: float

    @property
    def length(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class BiasConfig:
    eps_floor: float = 1e-8
    index_mode: IndexMode = IndexMode.RAW_DFT

    def __post_init__(self):
        if not self.eps_floor > 0:
            raise ContractViolation("eps_floor must be positive")
        object.__setattr__(self, "index_mode", IndexMode(self.index_mode))


def make_alpha(l: int) -> AlphaSchedule:
    """Evenly spaced exponents from 1 down to -1 over ``l`` entries."""
    if l < 1:
        raise ContractViolation(f"schedule length must be positive, got {l}")
    if l == 1:
        return AlphaSchedule(np.zeros(1), 0.0)
    i = np.arange(l, dtype=np.float64)
    alphas = 1.0 - 2.0 * i / (l - 1)
    # exact antisymmetry: mirror the first half
    alphas[l - 1 - np.arange(l // 2)] = -alphas[: l // 2]
    if l % 2:
        alphas[l // 2] = 0.0
    return AlphaSchedule(alphas, -2.0 / (l - 1))


def folded_alpha(l: int) -> np.ndarray:
    """Exponents indexed by physical frequency ``min(i, l - i)``.

    Linear from +1 at DC to -1 at the highest frequency, then centred so the
    schedule still sums to zero (exactly zero already for even ``l``).
    """
    if l < 1:
        raise ContractViolation(f"schedule length must be positive, got {l}")
    if l == 1:
        return np.zeros(1)
    freq = np.minimum(np.arange(l), l - np.arange(l)).astype(np.float64)
    top = freq.max()
    a = 1.0 - 2.0 * freq / top
    return a - a.mean()


@functools.lru_cache(maxsize=64)
def _axis_alpha(l: int, mode: IndexMode) -> np.ndarray:
    a = make_alpha(l).alphas if mode is IndexMode.RAW_DFT else folded_alpha(l)
    a = np.array(a)
    a.setflags(write=False)
    return a


def _as_mags(m) -> Tensor:
    if isinstance(m, SpectrumMap):
        return m.mags
    return m if isinstance(m, Tensor) else Tensor(m)


def log_bias_low(m: SpectrumMap | Tensor, cfg: BiasConfig = BiasConfig()) -> Tensor:
    """``log(bias)`` for maps shaped ``(..., h, w)``; one value per leading index."""
    mags = _as_mags(m)
    if mags.ndim < 2:
        raise ContractViolation(f"expected (..., h, w), got {mags.shape}")
    h, w = mags.shape[-2:]
    ah = _axis_alpha(h, cfg.index_mode)
    aw = _axis_alpha(w, cfg.index_mode)
    logm = ad.log(ad.add(mags, cfg.eps_floor))
    # column products: sum over rows i with a_i -> (..., w)
    col_terms = ad.reshape(ad.matmul(Tensor(ah[None, :]), logm), mags.shape[:-2] + (w,))
    # row products: sum over columns j with b_j -> (..., h)
    row_terms = ad.reshape(ad.matmul(logm, Tensor(aw[:, None])), mags.shape[:-2] + (h,))
    return ad.logsumexp(ad.concat([col_terms, row_terms], axis=-1), axis=-1)


def bias_low(m: SpectrumMap | Tensor, cfg: BiasConfig = BiasConfig()) -> Tensor:
    return ad.exp(log_bias_low(m, cfg))


def loss_freq(m: SpectrumMap | Tensor, cfg: BiasConfig = BiasConfig()) -> Tensor:
    """``-log(bias)``; minimising it pushes magnitude toward low frequencies."""
    return ad.neg(log_bias_low(m, cfg))


def direct_bias_low(mags: np.ndarray, cfg: BiasConfig = BiasConfig()) -> float:
    """Plain-product evaluation for a single ``h x w`` map (reference path)."""
    mags = np.asarray(mags, dtype=np.float64) + cfg.eps_floor
    h, w = mags.shape
    ah = _axis_alpha(h, cfg.index_mode)
    aw = _axis_alpha(w, cfg.index_mode)
    total = 0.0
    for j in range(w):
        total += float(np.prod(mags[:, j] ** ah))
    for i in range(h):
        total += float(np.prod(mags[i, :] ** aw))
    return total


def mean_spectrum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of channel-averaged magnitude maps.

    Accepts arrays shaped ``(c, h, w)`` or ``(h, w)``, or one stacked
    ``(n, c, h, w)`` array.
    """
    if isinstance(arrays, np.ndarray) and arrays.ndim == 4:
        stack = arrays
    else:
        items = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in arrays]
        if not items:
            raise ContractViolation("mean spectrum of an empty sequence")
        items = [a[None] if a.ndim == 2 else a for a in items]
        shapes = {a.shape for a in items}
        if len(shapes) != 1:
            raise ContractViolation(f"non-uniform shapes: {sorted(shapes)}")
        stack = np.stack(items)
    if len(stack) == 0:
        raise ContractViolation("mean spectrum of an empty sequence")
    with ad.no_grad():
        total = None
        # fixed-size chunks keep memory flat without changing summation order per bin
        for lo in range(0, len(stack), 256):
            part = channel_mean_spectrum(Tensor(stack[lo:lo + 256])).mags.data.sum(axis=0)
            total = part if total is None else total + part
    return total / len(stack)


def bias_of_mean_spectrum(arrays: Sequence[np.ndarray], cfg: BiasConfig = BiasConfig()) -> float:
    """Bias of ``E[|F(.)|]`` over a sample of images or Jacobians."""
    spec = mean_spectrum(arrays)
    with ad.no_grad():
        return bias_low(Tensor(spec), cfg).item()
