"""Common-corruption generators at five severities and their frequency profile.

All generators act on float images shaped ``(c, h, w)`` in [0, 1] and clip
the result to [0, 1] as the last step.  Randomness comes only from the
``seed`` argument.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .autodiff import ContractViolation, Tensor, no_grad
from .data import write_cifar_bin
from .freqbias import BiasConfig, bias_low, mean_spectrum

KINDS = (
    "gaussian-noise", "shot-noise", "impulse-noise", "speckle-noise",
    "contrast", "brightness", "saturate", "pixelate", "gaussian-blur", "fog",
)
SEVERITIES = (1, 2, 3, 4, 5)
MIN_PROFILE_IMAGES = 32

# per-severity parameters; index 0 is severity 1
SEVERITY_PARAMS: dict[str, tuple] = {
    "gaussian-noise": (0.04, 0.06, 0.08, 0.09, 0.10),   # noise std
    "shot-noise": (500.0, 250.0, 100.0, 75.0, 50.0),     # photon count scale
    "impulse-noise": (0.01, 0.02, 0.03, 0.05, 0.07),     # salt-and-pepper fraction
    "speckle-noise": (0.06, 0.10, 0.12, 0.16, 0.20),     # multiplicative noise std
    "contrast": (0.75, 0.5, 0.4, 0.3, 0.15),             # deviation scale about the mean
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),        # additive shift
    "saturate": (0.5, 0.2, 3.0, 5.0, 10.0),              # chroma scale
    "pixelate": (2, 2, 4, 4, 8),                         # block size
    "gaussian-blur": (0.4, 0.6, 0.8, 1.0, 1.5),          # kernel std in pixels
    "fog": ((0.2, 3.0), (0.5, 3.0), (0.75, 2.5), (1.0, 2.0), (1.5, 1.75)),  # (strength, wibble decay)
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown corruption kind {self.kind!r}")
        if self.severity not in SEVERITIES:
            raise ContractViolation(f"severity must be in 1..5, got {self.severity}")


def _gaussian_noise(x, p, rng):
    return x + rng.normal(scale=p, size=x.shape)


def _shot_noise(x, p, rng):
    return rng.poisson(x * p) / p


def _impulse_noise(x, p, rng):
    out = x.copy()
    u = rng.random(x.shape)
    out[u < p / 2] = 0.0
    out[(u >= p / 2) & (u < p)] = 1.0
    return out


def _speckle_noise(x, p, rng):
    return x + x * rng.normal(scale=p, size=x.shape)


def _contrast(x, p, rng):
    m = x.mean(axis=(-2, -1), keepdims=True)
    return (x - m) * p + m


def _brightness(x, p, rng):
    return x + p


def _saturate(x, p, rng):
    if x.shape[0] == 1:
        # no chroma in a single channel: fall back to a stretch about mid-grey
        return 0.5 + (x - 0.5) * (1.0 + (p - 1.0) * 0.1)
    lum = x.mean(axis=0, keepdims=True)
    return lum + (x - lum) * p


def _pixelate(x, p, rng):
    c, h, w = x.shape
    out = x.copy()
    for y0 in range(0, h, p):
        for x0 in range(0, w, p):
            block = out[:, y0:y0 + p, x0:x0 + p]
            block[...] = block.mean(axis=(1, 2), keepdims=True)
    return out


def _gaussian_blur(x, p, rng):
    return gaussian_filter(x, sigma=(0, p, p), mode="reflect")


def plasma_fractal(size: int, wibble_decay: float, rng: np.random.Generator) -> np.ndarray:
    """Diamond-square height map on a ``size x size`` grid (size a power of two),
    normalised to [0, 1]."""
    if size & (size - 1):
        raise ContractViolation("plasma size must be a power of two")
    grid = np.zeros((size, size))
    step = size
    wibble = 100.0
    while step >= 2:
        half = step // 2
        wibble /= wibble_decay
        # square step: centre of each square gets the corner mean plus noise
        corners = grid[0::step, 0::step]
        mean = (corners + np.roll(corners, -1, axis=0) + np.roll(corners, -1, axis=1)
                + np.roll(np.roll(corners, -1, axis=0), -1, axis=1)) / 4.0
        grid[half::step, half::step] = mean + rng.uniform(-wibble, wibble, mean.shape)
        # diamond step: edge midpoints get the mean of their four neighbours
        centres = grid[half::step, half::step]
        corners = grid[0::step, 0::step]
        ltsum = corners + np.roll(corners, -1, axis=0) + centres + np.roll(centres, 1, axis=1)
        grid[half::step, 0::step] = ltsum / 4.0 + rng.uniform(-wibble, wibble, ltsum.shape)
        ttsum = corners + np.roll(corners, -1, axis=1) + centres + np.roll(centres, 1, axis=0)
        grid[0::step, half::step] = ttsum / 4.0 + rng.uniform(-wibble, wibble, ttsum.shape)
        step = half
    grid -= grid.min()
    top = grid.max()
    return grid / top if top > 0 else grid


def _fog(x, p, rng):
    strength, decay = p
    c, h, w = x.shape
    size = 1 << max(int(np.ceil(np.log2(max(h, w)))), 1)
    # plasma is built larger than the image so the crop is not dominated by one tile
    fog = plasma_fractal(size * 2, decay, rng)[:h, :w]
    top = x.max()
    return (x + strength * fog[None]) * top / (top + strength) if top > 0 else x + strength * fog[None]


GENERATORS: dict[str, Callable] = {
    "gaussian-noise": _gaussian_noise,
    "shot-noise": _shot_noise,
    "impulse-noise": _impulse_noise,
    "speckle-noise": _speckle_noise,
    "contrast": _contrast,
    "brightness": _brightness,
    "saturate": _saturate,
    "pixelate": _pixelate,
    "gaussian-blur": _gaussian_blur,
    "fog": _fog,
}


def corrupt(x: np.ndarray, spec: CorruptionSpec, params: dict | None = None) -> np.ndarray:
    """Apply one corruption to a ``(c, h, w)`` image in [0, 1].

    ``params`` may override the severity table per kind (same layout as
    :data:`SEVERITY_PARAMS`).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ContractViolation(f"expected (c, h, w), got {x.shape}")
    table = (params or {}).get(spec.kind, SEVERITY_PARAMS[spec.kind])
    rng = np.random.default_rng(spec.seed)
    out = GENERATORS[spec.kind](x, table[spec.severity - 1], rng)
    return np.clip(out, 0.0, 1.0)


def corrupt_batch(images: np.ndarray, kind: str, severity: int, seed: int = 0,
                  params: dict | None = None) -> np.ndarray:
    """Corrupt every image; image ``i`` uses a seed derived from ``(seed, i)``."""
    seeds = np.random.SeedSequence([seed, KINDS.index(kind), severity]).generate_state(len(images))
    return np.stack([corrupt(img, CorruptionSpec(kind, severity, int(s)), params)
                     for img, s in zip(images, seeds)])


def corruption_deltas(images: np.ndarray, kind: str, seed: int = 0, params: dict | None = None) -> np.ndarray:
    """``C(x) - x`` for every image and all five severities, stacked."""
    return np.concatenate([corrupt_batch(images, kind, s, seed, params) - images for s in SEVERITIES])


def corruption_spectrum(images: Sequence[np.ndarray], kind: str, seed: int = 0,
                        params: dict | None = None) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ContractViolation("corruption profile needs at least one image")
    return mean_spectrum(corruption_deltas(images, kind, seed, params))


def corruption_bias(images: Sequence[np.ndarray], kind: str, seed: int = 0,
                    cfg: BiasConfig = BiasConfig(), params: dict | None = None) -> float:
    """Low-frequency bias of ``E[|F(C(x) - x)|]`` over images and severities.

    Needs at least :data:`MIN_PROFILE_IMAGES` images for a stable mean.
    """
    if len(images) < MIN_PROFILE_IMAGES:
        raise ContractViolation(f"corruption profile needs >= {MIN_PROFILE_IMAGES} images, got {len(images)}")
    spec = corruption_spectrum(images, kind, seed, params)
    with no_grad():
        return bias_low(Tensor(spec), cfg).item()


def export_corrupted(path, images: np.ndarray, labels: np.ndarray, kind: str, severity: int,
                     seed: int = 0, params: dict | None = None) -> None:
    """Write a corrupted 3x32x32 set as a CIFAR-10 binary file (pixels quantised to uint8)."""
    write_cifar_bin(path, corrupt_batch(images, kind, severity, seed, params), labels)
