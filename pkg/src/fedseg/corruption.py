"""Label and image corruption of a single client's data.

Label corruption mimics rough annotation: every tooth mask is dilated with
a k x k square (k drawn per image from ``dilation_kernels``) and, with
probability ``omission_prob``, one randomly chosen tooth is dropped first.
Image corruption adds i.i.d. Gaussian noise on the 8-bit scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data.generate import Sample, sample_rng
from .errors import ConfigError


@dataclass(frozen=True)
class CorruptionConfig:
    kind: str = "none"  # "label" | "image" | "none"
    dilation_kernels: tuple[int, ...] = (3, 5, 7, 11)
    omission_prob: float = 0.10
    noise_mu: float = 0.0
    noise_sigma: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("label", "image", "none"):
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if not self.dilation_kernels:
            raise ConfigError("dilation_kernels must not be empty")
        for k in self.dilation_kernels:
            _check_kernel(k)
        if not 0.0 <= self.omission_prob <= 1.0:
            raise ConfigError(f"omission_prob must lie in [0, 1], got {self.omission_prob}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def _check_kernel(k: int) -> None:
    if k < 3 or k % 2 == 0:
        raise ConfigError(f"dilation kernel must be odd and >= 3, got {k}")


def dilate(mask: np.ndarray, k: int) -> np.ndarray:
    """Binary dilation with a k x k all-ones structuring element."""
    _check_kernel(k)
    return ndimage.binary_dilation(np.asarray(mask, dtype=bool), structure=np.ones((k, k), dtype=bool))


def corrupt_labels(sample: Sample, cfg: CorruptionConfig, rng: np.random.Generator) -> Sample:
    """Dilate every instance (one kernel per image), optionally dropping one
    instance first. The image is left untouched."""
    k = int(rng.choice(cfg.dilation_kernels))
    instances = list(sample.instances)
    if instances and rng.random() < cfg.omission_prob:
        del instances[int(rng.integers(len(instances)))]
    return Sample(sample.id, sample.image.copy(), [dilate(m, k) for m in instances])


def corrupt_image(sample: Sample, cfg: CorruptionConfig, rng: np.random.Generator) -> Sample:
    """Add N(mu, sigma^2) noise, clip to [0, 255] and round. Masks untouched."""
    noisy = sample.image.astype(np.float64) + rng.normal(cfg.noise_mu, cfg.noise_sigma, sample.image.shape)
    image = np.rint(np.clip(noisy, 0.0, 255.0)).astype(np.uint8)
    return Sample(sample.id, image, [m.copy() for m in sample.instances])


def corrupt_sample(sample: Sample, cfg: CorruptionConfig) -> Sample:
    """Apply ``cfg`` with a stream derived from (cfg.seed, sample id)."""
    if cfg.kind == "none":
        return sample.copy()
    rng = sample_rng(cfg.seed, sample.id, stream="corrupt")
    if cfg.kind == "label":
        return corrupt_labels(sample, cfg, rng)
    return corrupt_image(sample, cfg, rng)


def corrupt_many(samples, cfg: CorruptionConfig) -> list[Sample]:
    return [corrupt_sample(s, cfg) for s in samples]
