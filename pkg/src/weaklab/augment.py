"""MixUp and time/frequency masking for spectrogram-like (time x frequency) features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TIME_AXIS = 0
FREQ_AXIS = 1
_AXES = {"time": TIME_AXIS, "frequency": FREQ_AXIS, "freq": FREQ_AXIS}


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 10.0
    rate: float = 0.5

    def __post_init__(self):
        if self.alpha <= 0:
            raise AugmentError(f"mixup alpha must be > 0, got {self.alpha}")
        if not 0.0 <= self.rate <= 1.0:
            raise AugmentError(f"mixup rate must lie in [0, 1], got {self.rate}")


@dataclass(frozen=True)
class MaskConfig:
    F: int = 48
    T: int = 192
    fill_value: float = 0.0

    def __post_init__(self):
        if self.F < 0 or self.T < 0:
            raise AugmentError("mask widths must be >= 0")

    def check_shape(self, shape: tuple[int, ...]) -> None:
        frames, bins = shape[-2], shape[-1]
        if self.T > frames:
            raise AugmentError(f"mask.T={self.T} exceeds {frames} time frames")
        if self.F > bins:
            raise AugmentError(f"mask.F={self.F} exceeds {bins} frequency bins")


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """One Beta(alpha, alpha) draw."""
    if alpha <= 0:
        raise AugmentError(f"alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mixup(xi: np.ndarray, yi: np.ndarray, xj: np.ndarray, yj: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray]:
    xi, xj = np.asarray(xi, dtype=np.float64), np.asarray(xj, dtype=np.float64)
    yi, yj = np.asarray(yi, dtype=np.float64), np.asarray(yj, dtype=np.float64)
    if xi.shape != xj.shape:
        raise AugmentError(f"shape mismatch: {xi.shape} vs {xj.shape}")
    if yi.shape != yj.shape:
        raise AugmentError(f"label shape mismatch: {yi.shape} vs {yj.shape}")
    if not 0.0 <= lam <= 1.0:
        raise AugmentError(f"lambda must lie in [0, 1], got {lam}")
    return lam * xi + (1 - lam) * xj, lam * yi + (1 - lam) * yj


def mask(
    spec: np.ndarray,
    axis: str | int,
    max_width: int,
    rng: np.random.Generator,
    fill_value: float = 0.0,
) -> np.ndarray:
    """Blank one random contiguous window along ``axis`` of a (time, freq) tensor.

    Width is uniform on {0..max_width}, start uniform on {0..len-width}.
    Returns a new array; everything outside the window is copied unchanged.
    """
    ax = _AXES[axis] if isinstance(axis, str) else int(axis)
    spec = np.asarray(spec)
    length = spec.shape[ax]
    if max_width > length:
        raise AugmentError(f"max_width {max_width} exceeds axis length {length}")
    out = spec.copy()
    if max_width <= 0:
        return out
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, length - width + 1))
    window = [slice(None)] * spec.ndim
    window[ax] = slice(start, start + width)
    out[tuple(window)] = fill_value
    return out


def mask_bag(bag: np.ndarray, cfg: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply one frequency mask then one time mask to every instance of a bag."""
    out = np.empty_like(bag, dtype=np.float64)
    for i, inst in enumerate(bag):
        m = mask(inst, FREQ_AXIS, cfg.F, rng, cfg.fill_value)
        out[i] = mask(m, TIME_AXIS, cfg.T, rng, cfg.fill_value)
    return out


def mixup_batch(
    x: np.ndarray, y: np.ndarray, cfg: MixupConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mix each sample with a partner from a seeded permutation, with probability ``cfg.rate``.

    Returns the mixed inputs, soft labels and a boolean mask of mixed rows.
    """
    x = np.array(x, dtype=np.float64)
    y = np.array(y, dtype=np.float64)
    partner = rng.permutation(len(x))
    mixed = rng.random(len(x)) < cfg.rate
    x_src, y_src = x.copy(), y.copy()
    for i in np.flatnonzero(mixed):
        lam = sample_lambda(cfg.alpha, rng)
        j = partner[i]
        x[i], y[i] = mixup(x_src[i], y_src[i], x_src[j], y_src[j], lam)
    return x, y, mixed
