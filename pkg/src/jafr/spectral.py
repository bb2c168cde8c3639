"""Differentiable 2-D DFT and Fourier magnitude maps.

The transform is written as two dense real matrix products per axis,
``F = (C_h - i S_h) x (C_w - i S_w)``, so it is linear in the input and
differentiable to any order through :func:`jafr.autodiff.matmul`.  Index
(0, 0) is the DC bin; no fftshift is applied.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

DEFAULT_SQRT_EPS = 1e-12


@functools.lru_cache(maxsize=32)
def dft_matrices(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Cosine and sine parts of the n-point DFT matrix."""
    k = np.arange(n)
    # reduce the phase index mod n before scaling: keeps angles small and exact
    phase = 2.0 * np.pi * ((np.outer(k, k) % n) / n)
    cos = np.cos(phase)
    sin = np.sin(phase)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def dft2(image: Tensor) -> tuple[Tensor, Tensor]:
    """Unshifted 2-D DFT over the last two axes; returns ``(real, imag)``.

    Leading axes (batch, channel) are carried through unchanged.
    """
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim < 2:
        raise ContractViolation(f"dft2 needs at least 2 dims, got {image.shape}")
    h, w = image.shape[-2:]
    if h < 1 or w < 1:
        raise ContractViolation("dft2 needs non-empty spatial dims")
    ch, sh = (Tensor(m) for m in dft_matrices(h))
    cw, sw = (Tensor(m) for m in dft_matrices(w))
    xc = ad.matmul(image, cw)
    xs = ad.matmul(image, sw)
    real = ad.sub(ad.matmul(ch, xc), ad.matmul(sh, xs))
    imag = ad.neg(ad.add(ad.matmul(sh, xc), ad.matmul(ch, xs)))
    return real, imag


@dataclass
class SpectrumMap:
    """Non-negative Fourier magnitudes over the last two axes of ``mags``."""

    mags: Tensor

    @property
    def height(self) -> int:
        return self.mags.shape[-2]

    @property
    def width(self) -> int:
        return self.mags.shape[-1]

    def numpy(self) -> np.ndarray:
        return self.mags.data


def magnitude_map(real: Tensor, imag: Tensor, eps: float = DEFAULT_SQRT_EPS) -> SpectrumMap:
    """``sqrt(re^2 + im^2 + eps)``; eps keeps the gradient defined at zero."""
    if real.shape != imag.shape:
        raise ContractViolation(f"real/imag shape mismatch: {real.shape} vs {imag.shape}")
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    power = ad.add(ad.add(ad.mul(real, real), ad.mul(imag, imag)), eps)
    return SpectrumMap(ad.sqrt(power))


def channel_mean_spectrum(image: Tensor, eps: float = DEFAULT_SQRT_EPS) -> SpectrumMap:
    """Average of per-channel magnitude maps for an array shaped ``(..., c, h, w)``."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    if image.ndim < 3:
        raise ContractViolation(f"expected (..., c, h, w), got {image.shape}")
    if image.shape[-3] == 0:
        raise ContractViolation("image has no channels")
    m = magnitude_map(*dft2(image), eps=eps)
    return SpectrumMap(ad.mean(m.mags, axis=image.ndim - 3))


def naive_dft2(image: np.ndarray) -> np.ndarray:
    """Direct O(h^2 w^2) double sum; kept as an independent reference."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    out = np.zeros((h, w), dtype=np.complex128)
    a = np.arange(h)[:, None]
    b = np.arange(w)[None, :]
    for u in range(h):
        for v in range(w):
            out[u, v] = np.sum(image * np.exp(-2j * np.pi * (u * a / h + v * b / w)))
    return out


# -- exports ---------------------------------------------------------------

def to_log_pgm_bytes(mags: np.ndarray) -> bytes:
    """8-bit binary PGM of ``log1p(mags)``, normalised by the image maximum."""
    mags = np.asarray(mags, dtype=np.float64)
    if mags.ndim != 2:
        raise ContractViolation("PGM export takes a 2-D map")
    logm = np.log1p(np.maximum(mags, 0.0))
    top = logm.max()
    scaled = np.zeros_like(logm) if top <= 0 else logm / top
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def to_minmax_pgm_bytes(img: np.ndarray) -> bytes:
    """8-bit PGM of an arbitrary real map, min-max normalised to [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_spectrum_pgm(path: str | Path, mags: np.ndarray) -> None:
    Path(path).write_bytes(to_log_pgm_bytes(mags))


def write_spectrum_csv(path: str | Path, mags: np.ndarray) -> None:
    np.savetxt(path, np.asarray(mags, dtype=np.float64), delimiter=",", fmt="%.17g")
