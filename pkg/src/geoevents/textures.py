"""Procedural value-noise textures for synthetic tweet images.

A texture *family* is a palette plus a frequency profile.  Images of one
coherent family are jittered windows of one shared base field with light
per-image pixel noise; incoherent images each come from their own family.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

PIXEL_NOISE = 0.05


def _bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Upsample a (g+1, g+1, C) lattice to (size, size, C) by bilinear interpolation."""
    g = grid.shape[0] - 1
    t = np.linspace(0.0, g, size, endpoint=False)
    i = t.astype(int)
    f = t - i
    f = f * f * (3 - 2 * f)  # smoothstep, the "Perlin-style" fade
    top = grid[i][:, i] * (1 - f)[None, :, None] + grid[i][:, i + 1] * f[None, :, None]
    bot = grid[i + 1][:, i] * (1 - f)[None, :, None] + grid[i + 1][:, i + 1] * f[None, :, None]
    return top * (1 - f)[:, None, None] + bot * f[:, None, None]


def value_noise(size: int, base_cells: int, octaves: int, persistence: float,
                channels: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((size, size, channels))
    amp, total = 1.0, 0.0
    cells = base_cells
    for _ in range(octaves):
        grid = rng.random((cells + 1, cells + 1, channels))
        out += amp * _bilinear(grid, size)
        total += amp
        amp *= persistence
        cells *= 2
    return out / total


@dataclass(frozen=True)
class TextureFamily:
    palette: np.ndarray       # (2, 3): two endpoint colours
    tint: np.ndarray          # (3, 3) channel mixing
    base_cells: int
    octaves: int
    persistence: float
    contrast: float


def random_family(rng: np.random.Generator) -> TextureFamily:
    """A family is dominated by one random hue, dark to bright."""
    hue = rng.random()
    dark = colorsys.hsv_to_rgb(hue, rng.uniform(0.6, 1.0), rng.uniform(0.15, 0.35))
    light = colorsys.hsv_to_rgb((hue + rng.uniform(-0.12, 0.12)) % 1.0,
                                rng.uniform(0.5, 1.0), rng.uniform(0.75, 1.0))
    return TextureFamily(
        palette=np.array([dark, light]),
        tint=rng.normal(0.0, 0.15, (3, 3)),
        base_cells=int(rng.integers(3, 9)),
        octaves=3,
        persistence=float(rng.uniform(0.5, 0.65)),
        contrast=float(rng.uniform(1.5, 2.0)),
    )


def render(family: TextureFamily, size: int, rng: np.random.Generator) -> np.ndarray:
    n = value_noise(size, family.base_cells, family.octaves, family.persistence, 4, rng)
    lum = np.clip(0.5 + family.contrast * (n[..., :1] - 0.5), 0.0, 1.0)
    img = family.palette[0] * (1 - lum) + family.palette[1] * lum
    img = img + (n[..., 1:] - 0.5) @ family.tint
    return np.clip(img, 0.0, 1.0)


def coherent_images(count: int, size: int, rng: np.random.Generator,
                    family: TextureFamily | None = None, margin: int | None = None,
                    noise: float = PIXEL_NOISE) -> list[np.ndarray]:
    """``count`` jittered windows of one shared base texture, plus Gaussian pixel noise."""
    family = family or random_family(rng)
    margin = size // 2 if margin is None else margin
    base = render(family, size + margin, rng)
    out = []
    for _ in range(count):
        r, c = rng.integers(0, margin + 1, size=2)
        img = base[r:r + size, c:c + size] + rng.normal(0.0, noise, (size, size, 3))
        out.append(np.clip(img, 0.0, 1.0))
    return out


def incoherent_images(count: int, size: int, rng: np.random.Generator,
                      noise: float = PIXEL_NOISE) -> list[np.ndarray]:
    """``count`` images, each from its own independent family."""
    return [np.clip(render(random_family(rng), size, rng)
                    + rng.normal(0.0, noise, (size, size, 3)), 0.0, 1.0)
            for _ in range(count)]
