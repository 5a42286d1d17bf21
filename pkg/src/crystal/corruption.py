"""Stochastic image corruption: seeded blur, mask, jigsaw, colour and noise primitives.

Images are ``(H, W, 3)`` float64 arrays with values in [0, 1]. Every primitive
is a pure function of its arguments; randomness comes only from a
``numpy.random.Generator`` seeded from the CorruptionSpec.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import ContractError, DimensionError

MODES = ("blur", "mask", "jigsaw", "color", "noise", "identity")

# intensity ladders; p(eta) is uniform over each one
LEVELS: dict[str, tuple[float, ...]] = {
    "blur": (2.0, 5.0, 10.0),
    "mask": (0.2, 0.5, 0.8),
    "jigsaw": (0.2, 0.5, 0.8),
    "color": (0.5, 1.0, 2.0),
    "noise": (15.0, 30.0, 50.0),
    "identity": (),
}

MASK_FILL = 0.5
JIGSAW_GRID = 4


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"image must be (H, W, 3), got {image.shape}")
    if image.size == 0:
        raise DimensionError("empty image")
    if np.any(image < 0) or np.any(image > 1):
        raise ContractError("pixel values must lie in [0, 1]")
    return image


@dataclass(frozen=True)
class CorruptionSpec:
    mode: str
    level: float = 0.0
    seed: int = 0
    level_set: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown corruption mode {self.mode!r}; expected one of {MODES}")
        if self.mode == "identity":
            return
        if self.level_set:
            if self.level not in self.level_set:
                raise ContractError(
                    f"level {self.level} not in the {self.mode} ladder {list(self.level_set)}"
                )
        elif self.level < 0:
            raise ContractError("level must be >= 0")

    @classmethod
    def identity(cls) -> "CorruptionSpec":
        return cls("identity")


def sample_spec(mode: str, seed: int, levels: tuple[float, ...] | None = None) -> CorruptionSpec:
    """Draw an intensity uniformly from the mode's ladder, deterministically per seed."""
    if mode not in MODES:
        raise ContractError(f"unknown corruption mode {mode!r}")
    ladder = LEVELS[mode] if levels is None else tuple(float(v) for v in levels)
    if mode == "identity":
        return CorruptionSpec("identity", seed=seed)
    rng = np.random.default_rng(seed)
    level = ladder[int(rng.integers(len(ladder)))]
    return CorruptionSpec(mode, level, seed, ladder)


def corrupt(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    image = check_image(image)
    if spec.mode == "identity":
        return image
    if spec.mode == "blur":
        return gaussian_blur(image, spec.level)
    if spec.mode == "mask":
        return random_mask(image, spec.level, spec.seed)
    if spec.mode == "jigsaw":
        return jigsaw(image, spec.level, spec.seed)
    if spec.mode == "color":
        return color_distort(image, spec.level, spec.seed)
    return gaussian_noise(image, spec.level, spec.seed)


# ---------------------------------------------------------------- blur


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _convolve_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    padded = np.pad(img, pad, mode="reflect")
    n = img.shape[axis]
    # centre + sum w * (neighbour - centre): exact on constant input
    acc = np.zeros_like(img)
    for i, w in enumerate(kernel):
        acc += w * (np.take(padded, np.arange(i, i + n), axis=axis) - img)
    return img + acc


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, half-width ceil(3 sigma), reflect padding."""
    if sigma <= 0:
        raise ContractError("sigma must be > 0")
    k = gaussian_kernel(sigma)
    out = _convolve_axis(_convolve_axis(image, k, 0), k, 1)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- spatial


def mask_rectangle(height: int, width: int, area_fraction: float, rng: np.random.Generator):
    """(top, left, h, w) of a rectangle with area close to ``area_fraction * H * W``."""
    area = area_fraction * height * width
    # aspect h/w in [0.5, 2], narrowed so neither side has to be clipped
    lo = max(0.5, area / width**2)
    hi = min(2.0, height**2 / area)
    aspect = rng.uniform(lo, hi)
    h = int(np.clip(round(math.sqrt(area * aspect)), 1, height))
    w = int(np.clip(round(area / h), 1, width))
    top = int(rng.integers(0, height - h + 1))
    left = int(rng.integers(0, width - w + 1))
    return top, left, h, w


def random_mask(image: np.ndarray, area_fraction: float, seed: int) -> np.ndarray:
    if not 0 < area_fraction < 1:
        raise ContractError("area_fraction must be in (0, 1)")
    H, W, _ = image.shape
    top, left, h, w = mask_rectangle(H, W, area_fraction, np.random.default_rng(seed))
    out = image.copy()
    out[top : top + h, left : left + w, :] = MASK_FILL
    return out


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation of range(n) with no fixed point (n >= 2), by rejection."""
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def jigsaw_plan(n_tiles: int, shuffle_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Source tile for every destination tile."""
    k = int(math.ceil(shuffle_ratio * n_tiles - 1e-9))
    source = np.arange(n_tiles)
    if k < 2:
        return source
    chosen = np.sort(rng.choice(n_tiles, size=k, replace=False))
    source[chosen] = chosen[derangement(k, rng)]
    return source


def jigsaw(image: np.ndarray, shuffle_ratio: float, seed: int, grid: int = JIGSAW_GRID) -> np.ndarray:
    if not 0 <= shuffle_ratio <= 1:
        raise ContractError("shuffle_ratio must be in [0, 1]")
    H, W, C = image.shape
    if H % grid or W % grid:
        raise DimensionError(f"image {H}x{W} not divisible by jigsaw grid {grid}")
    th, tw = H // grid, W // grid
    tiles = image.reshape(grid, th, grid, tw, C).transpose(0, 2, 1, 3, 4).reshape(grid * grid, th, tw, C)
    source = jigsaw_plan(grid * grid, shuffle_ratio, np.random.default_rng(seed))
    out = tiles[source]
    return out.reshape(grid, grid, th, tw, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)


# ---------------------------------------------------------------- photometric


def color_jitter(
    image: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float
) -> np.ndarray:
    """Apply fixed jitter factors in order brightness, contrast, saturation, hue.

    ``hue`` is a rotation in turns. A factor of exactly 1 (or hue 0) is skipped.
    """
    out = image
    if brightness != 1.0:
        out = np.clip(out * brightness, 0.0, 1.0)
    if contrast != 1.0:
        m = _gray(out).mean()
        out = np.clip((out - m) * contrast + m, 0.0, 1.0)
    if saturation != 1.0:
        g = _gray(out)[..., None]
        out = np.clip((out - g) * saturation + g, 0.0, 1.0)
    if hue != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out


def _gray(image: np.ndarray) -> np.ndarray:
    return image @ np.array([0.299, 0.587, 0.114])


def jitter_factors(strength: float, rng: np.random.Generator) -> tuple[float, float, float, float]:
    lo, hi = max(0.0, 1.0 - 0.4 * strength), 1.0 + 0.4 * strength
    b, c, s = (float(rng.uniform(lo, hi)) for _ in range(3))
    h = float(rng.uniform(-0.1 * strength, 0.1 * strength))
    return b, c, s, h


def color_distort(image: np.ndarray, strength: float, seed: int) -> np.ndarray:
    if strength <= 0:
        raise ContractError("strength must be > 0")
    return color_jitter(image, *jitter_factors(strength, np.random.default_rng(seed)))


def gaussian_noise(image: np.ndarray, sigma255: float, seed: int) -> np.ndarray:
    """Additive i.i.d. normal noise; ``sigma255`` is on the 0-255 scale."""
    if sigma255 <= 0:
        raise ContractError("sigma must be > 0")
    noise = np.random.default_rng(seed).normal(0.0, sigma255 / 255.0, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)
