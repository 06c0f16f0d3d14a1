"""Synthetic panoramic-radiograph-like samples.

Each image holds an upper and a lower row of teeth along a curved occlusal
line. A tooth is a rounded crown on a tapering root, rotated to follow the
arch. The background is a smooth gradient plus multi-octave value noise,
with bright bone bands (palate, jaw, rami) that make plain thresholding
insufficient. Every sample is a pure function of ``(seed, sample id)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..errors import ConfigError


@dataclass(frozen=True)
class GenConfig:
    height: int = 70
    width: int = 150
    teeth_per_arch: tuple[int, int] = (4, 8)
    tooth_length: tuple[float, float] = (0.26, 0.34)  # fraction of height
    tooth_fill: tuple[float, float] = (0.68, 0.82)  # tooth width / slot width
    arch_span: tuple[float, float] = (0.14, 0.86)  # fraction of width
    smile: tuple[float, float] = (-0.04, 0.10)  # occlusal curvature, fraction of height
    contrast: tuple[float, float] = (38.0, 80.0)
    background: tuple[float, float] = (45.0, 90.0)
    texture_amplitude: float = 9.0
    sensor_noise: float = 3.0
    blur_sigma: float = 0.7

    def __post_init__(self):
        lo, hi = self.teeth_per_arch
        if hi < 1 or lo < 0 or lo > hi:
            raise ConfigError(f"teeth_per_arch must satisfy 0 <= lo <= hi, hi >= 1; got {self.teeth_per_arch}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("image must be at least 8x8")


@dataclass
class Sample:
    id: int
    image: np.ndarray  # uint8 (H, W)
    instances: list[np.ndarray] = field(default_factory=list)  # bool (H, W) each

    @property
    def union_mask(self) -> np.ndarray:
        if not self.instances:
            return np.zeros(self.image.shape, dtype=bool)
        return np.logical_or.reduce(self.instances)

    def copy(self) -> "Sample":
        return Sample(self.id, self.image.copy(), [m.copy() for m in self.instances])


def sample_rng(seed: int, sample_id: int, stream: str = "gen") -> np.random.Generator:
    """Independent stream per (seed, sample, purpose)."""
    tag = int.from_bytes(stream.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([seed, sample_id, tag])


def _value_noise(rng, h, w, octaves=3) -> np.ndarray:
    out = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        gh, gw = 3 * 2**o + 1, 6 * 2**o + 1
        grid = rng.standard_normal((gh, gw))
        up = ndimage.zoom(grid, (h / gh, w / gw), order=3, mode="nearest", grid_mode=True)
        out += amp * up[:h, :w]
        amp *= 0.5
    return out / 1.75


def _tooth_mask(h, w, cx, cy, length, width, angle, upward) -> np.ndarray:
    """Rasterize one tooth; (cx, cy) is the crown tip, the root extends
    ``length`` pixels up (upper arch) or down (lower arch) after rotation."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float) + 0.5
    dx, dy = xx - cx, yy - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = ca * dx + sa * dy          # across the tooth
    v = -sa * dx + ca * dy         # along the tooth, crown tip at 0
    if upward:
        v = -v
    t = v / length
    crown = 0.32
    half = np.where(
        t < crown,
        0.5 * width * np.sqrt(np.clip(1.0 - ((t - crown) / crown) ** 2, 0.0, None)),
        0.5 * width * (1.0 - 0.72 * (t - crown) / (1.0 - crown)),
    )
    return (t >= 0.0) & (t <= 1.0) & (np.abs(u) <= half)


def generate_sample(sample_id: int, seed: int, cfg: GenConfig | None = None) -> Sample:
    cfg = cfg or GenConfig()
    rng = sample_rng(seed, sample_id)
    h, w = cfg.height, cfg.width

    smile = rng.uniform(*cfg.smile) * h
    occ = rng.uniform(0.46, 0.54) * h
    gap = rng.uniform(0.015, 0.035) * h
    x0, x1 = cfg.arch_span[0] * w, cfg.arch_span[1] * w
    xc = 0.5 * (x0 + x1) + rng.uniform(-0.02, 0.02) * w

    def occlusal(x):
        return occ + smile * ((x - xc) / (0.5 * (x1 - x0))) ** 2

    instances: list[np.ndarray] = []
    taken = np.zeros((h, w), dtype=bool)
    tooth_params = []
    for upward in (True, False):
        n = int(rng.integers(cfg.teeth_per_arch[0], cfg.teeth_per_arch[1] + 1))
        if n == 0:
            continue
        slot = (x1 - x0) / n
        for k in range(n):
            cx = x0 + (k + 0.5) * slot + rng.uniform(-0.12, 0.12) * slot
            tip = occlusal(cx) + (-gap if upward else gap)
            slope = 2.0 * smile * (cx - xc) / (0.5 * (x1 - x0)) ** 2
            angle = np.arctan(slope) + rng.uniform(-0.12, 0.12)
            length = rng.uniform(*cfg.tooth_length) * h
            width = rng.uniform(*cfg.tooth_fill) * slot
            m = _tooth_mask(h, w, cx, tip, length, width, angle, upward) & ~taken
            if m.sum() < 4:
                continue
            taken |= m
            instances.append(m)
            tooth_params.append((upward, rng.uniform(*cfg.contrast)))

    # background
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    img = rng.uniform(*cfg.background) + rng.uniform(-15, 15) * (xx - 0.5) + rng.uniform(-10, 10) * (yy - 0.5)
    img = img + cfg.texture_amplitude * _value_noise(rng, h, w)
    # bone bands: maxilla above upper roots, mandible below lower roots, rami at both sides
    root_up = occ - 0.42 * h
    root_dn = occ + 0.42 * h
    yyp = yy * h
    img += rng.uniform(8, 22) * np.exp(-(((yyp - root_up) / (0.10 * h)) ** 2))
    img += rng.uniform(8, 22) * np.exp(-(((yyp - root_dn) / (0.10 * h)) ** 2))
    ramus = rng.uniform(25, 55)
    xxp = xx * w
    img += ramus * (1.0 / (1.0 + np.exp((xxp - 0.09 * w) / 1.5)) + 1.0 / (1.0 + np.exp(-(xxp - 0.91 * w) / 1.5)))

    for m, (upward, contrast) in zip(instances, tooth_params):
        ys, xs = np.nonzero(m)
        # enamel near the occlusal end is brighter than the root
        depth = (ys - ys.min()) / max(1, ys.max() - ys.min())
        if not upward:
            depth = 1.0 - depth
        shade = contrast * (0.75 + 0.45 * depth)
        img[ys, xs] += shade

    img = ndimage.gaussian_filter(img, cfg.blur_sigma)
    img += cfg.sensor_noise * rng.standard_normal((h, w))
    image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return Sample(sample_id, image, instances)


def generate_dataset(n: int, seed: int, cfg: GenConfig | None = None) -> list[Sample]:
    """``n`` samples with ids ``0..n-1``."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    cfg = cfg or GenConfig()
    return [generate_sample(i, seed, cfg) for i in range(n)]
