"""A toy instance whose middle layer provably needs the high-bit candidate.

Construction: two image channels carry latent values (u, v); labels are
the quadrant of (m1, m2) = (u + 0.25 v, -0.25 u + v). The network is

    depthwise 3x3 -> pointwise 1x1 (2 -> 2) -> relu -> global pool -> dense

The depthwise layer cannot mix channels no matter its precision. The
pointwise layer must realize the two mixing rows (1, 0.25) and
(-0.25, 1): binary quantization forces both rows onto (+-s, +-s), and
per-channel rescaling (a, b) upstream cannot satisfy a = 0.25 b and
0.25 a = b at once, so any binary mixing frame sits tens of degrees off
both class boundaries. The 2-wide rectified bottleneck then destroys
everything off the two realized directions, so the dense head cannot
repair the damage (with a wider pointwise layer it could: four binary
sign rows form an invertible frame a precise head can re-mix). Because
the mixing rows are orthogonal, the four class cells are exactly 90
degrees wide and the rectifier's blind quadrant cannot hide inside one
either. Measured ceiling for any decoder over binary-mixed features is
roughly 88% accuracy; the 8-bit rows recover the labels entirely. The
head itself only needs the sign pattern of the two pooled features,
well within binary's reach.

The loss tolerance below was calibrated once against the exhaustive
oracle: every assignment with an 8-bit pointwise layer fine-tunes to a
validation loss clearly under it, every binary-pointwise assignment
stays clearly above.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Flatten,
    GlobalAvgPool,
    QuantUnit,
    ReLU,
    Sequential,
)
from .models import Network, register_builder

MIX_GAMMA = 0.25
PLANTED_THETA = 0.30
IMAGE_SIZE = 6
SENSITIVE_LAYER = "mix"  # the pointwise unit


def _spatial_pattern(size: int) -> np.ndarray:
    ramp = np.cos(np.linspace(-1.0, 1.0, size) * np.pi / 2)
    return 0.4 + 0.6 * np.outer(ramp, ramp)


def make_planted_dataset(n: int, seed: int, split: str = "train",
                         margin: float = 0.2, spread: float = 2.0,
                         noise: float = 0.05) -> Dataset:
    """Quadrant-labelled samples with a margin around both boundaries."""
    rng = np.random.default_rng(seed)
    quadrant = rng.integers(0, 4, size=n)
    signs = np.stack([np.where(quadrant // 2 == 0, 1.0, -1.0),
                      np.where(quadrant % 2 == 0, 1.0, -1.0)], axis=1)
    m = signs * rng.uniform(margin, spread, size=(n, 2))

    # invert the mixing so the network has to redo it
    mix = np.array([[1.0, MIX_GAMMA], [-MIX_GAMMA, 1.0]])
    uv = m @ np.linalg.inv(mix).T

    pattern = _spatial_pattern(IMAGE_SIZE)
    images = uv[:, :, None, None] * pattern[None, None, :, :]
    images += rng.normal(0.0, noise, size=images.shape)
    return Dataset(images, quadrant.astype(np.int64), split)


def build_planted_net(seed: int = 0) -> Network:
    rng = np.random.default_rng(seed)
    dw = DepthwiseConv2d(2, 3, padding=1, rng=rng)
    # pass-through start (positive channel gain); a random kernel flips
    # channel signs half the time and strands the seeded layers above it
    dw.weight.data = rng.normal(0.0, 0.05, size=(2, 1, 3, 3))
    dw.weight.data[:, 0, 1, 1] += 1.0
    mix = Conv2d(2, 2, 1, rng=rng)
    # identity-leaning start: a random 2x2 bottleneck behind a rectifier
    # collapses too often for the pretrain budget to recover
    mix.weight.data = (
        0.8 * np.eye(2).reshape(2, 2, 1, 1)
        + rng.normal(0.0, 0.1, size=(2, 2, 1, 1))
    )
    head = Dense(2, 4, rng=rng)
    # seed the head at the sign pattern the construction solves with, so
    # every bitwidth variant of it fine-tunes from the same basin
    head.weight.data = (
        0.5 * np.array([[1.0, 1, -1, -1], [1.0, -1, 1, -1]])
        + rng.normal(0.0, 0.05, size=(2, 4))
    )
    body = Sequential([
        QuantUnit("dw", dw, BatchNorm(2), "depthwise-conv"),
        QuantUnit("mix", mix, BatchNorm(2), "conv"),
        ReLU(),
        GlobalAvgPool(),
        Flatten(),
        QuantUnit("head", head, BatchNorm(4), "dense"),
    ])
    meta = {"builder": "planted_toy", "seed": seed, "kwargs": {}}
    return Network(meta, body)


register_builder("planted_toy", build_planted_net)


def planted_splits(seed: int, n_train: int = 1024, n_valid: int = 256,
                   n_test: int = 256):
    """Independent train/valid/test draws from the planted distribution."""
    return (
        make_planted_dataset(n_train, seed=seed * 1000 + 1, split="train"),
        make_planted_dataset(n_valid, seed=seed * 1000 + 2, split="valid"),
        make_planted_dataset(n_test, seed=seed * 1000 + 3, split="test"),
    )
