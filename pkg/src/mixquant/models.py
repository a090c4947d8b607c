"""Model zoo and layer bookkeeping.

Networks are flat sequences; every weight-carrying layer is wrapped in a
QuantUnit together with its batch norm, which is what the bitwidth
search operates on. Builders are registered by name so checkpoints can
rebuild the architecture they were saved from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Flatten,
    GlobalAvgPool,
    MaxPool2d,
    Module,
    QuantDecision,
    QuantUnit,
    ReLU,
    Sequential,
)
from .quantizers import FLOAT_BITS


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one quantizable layer."""

    name: str
    kind: str  # conv | depthwise-conv | dense
    weight_shape: tuple
    params: int
    quantizable: bool = True

    def __post_init__(self):
        if self.params != int(np.prod(self.weight_shape)):
            raise ValueError(
                f"{self.name}: params {self.params} != product of {self.weight_shape}"
            )


class Network(Module):
    """A sequential model plus the metadata needed to rebuild it."""

    def __init__(self, meta: dict, body: Sequential):
        super().__init__()
        self.meta = meta
        self.body = body

    def forward(self, x):
        return self.body(x)

    def quant_units(self) -> list[QuantDecision]:
        return [m for m in self.body.items if isinstance(m, QuantDecision)]

    def layer_specs(self) -> list[LayerSpec]:
        return [
            LayerSpec(u.name, u.kind, tuple(u.weight.shape), u.weight_count)
            for u in self.quant_units()
        ]

    def total_weight_count(self) -> int:
        return sum(u.weight_count for u in self.quant_units())

    def float_payload_bits(self) -> int:
        return FLOAT_BITS * self.total_weight_count()


_BUILDERS: dict[str, Callable[..., Network]] = {}


def register_builder(name: str, fn: Callable[..., Network]) -> None:
    _BUILDERS[name] = fn


def build_from_meta(meta: dict) -> Network:
    builder = meta.get("builder")
    if builder not in _BUILDERS:
        raise KeyError(f"unknown model builder {builder!r}")
    return _BUILDERS[builder](seed=meta.get("seed", 0), **meta.get("kwargs", {}))


def build_mnist_dwsep(widths: tuple = (16, 32), seed: int = 0) -> Network:
    """Two depthwise-separable blocks and a dense classifier for 28x28x1.

    Block = depthwise 3x3 + pointwise 1x1, each with its own batch norm
    and relu, followed by 2x2 max pooling. All five weight layers,
    classifier included, take part in the bitwidth search.
    """
    w1, w2 = widths
    rng = np.random.default_rng(seed)
    body = Sequential([
        QuantUnit("dw1", DepthwiseConv2d(1, 3, padding=1, rng=rng),
                  BatchNorm(1), "depthwise-conv"),
        ReLU(),
        QuantUnit("pw1", Conv2d(1, w1, 1, rng=rng), BatchNorm(w1), "conv"),
        ReLU(),
        MaxPool2d(2),
        QuantUnit("dw2", DepthwiseConv2d(w1, 3, padding=1, rng=rng),
                  BatchNorm(w1), "depthwise-conv"),
        ReLU(),
        QuantUnit("pw2", Conv2d(w1, w2, 1, rng=rng), BatchNorm(w2), "conv"),
        ReLU(),
        MaxPool2d(2),
        Flatten(),
        QuantUnit("fc", Dense(w2 * 7 * 7, 10, rng=rng), BatchNorm(10), "dense"),
    ])
    meta = {"builder": "mnist_dwsep", "seed": seed, "kwargs": {"widths": list(widths)}}
    return Network(meta, body)


def build_vgg_small(depth: int = 4, widths: tuple = (16, 32, 48, 64),
                    in_channels: int = 3, seed: int = 0) -> Network:
    """VGG-style stacks for 32x32 inputs: pairs of 3x3 convs with batch
    norm and relu, pooling after each pair, global average pooling and a
    dense head over 10 classes. `depth` counts conv layers.
    """
    if depth not in (4, 6, 8):
        raise ValueError(f"unsupported depth {depth}; expected one of 4, 6, 8")
    rng = np.random.default_rng(seed)
    stages = widths[: depth // 2]
    items: list[Module] = []
    c_in = in_channels
    idx = 1
    for w in stages:
        for _ in range(2):
            items.append(
                QuantUnit(f"conv{idx}", Conv2d(c_in, w, 3, padding=1, rng=rng),
                          BatchNorm(w), "conv")
            )
            items.append(ReLU())
            c_in = w
            idx += 1
        items.append(MaxPool2d(2))
    items.append(GlobalAvgPool())
    items.append(QuantUnit("fc", Dense(stages[-1], 10, rng=rng),
                           BatchNorm(10), "dense"))
    meta = {
        "builder": "vgg_small",
        "seed": seed,
        "kwargs": {"depth": depth, "widths": list(widths), "in_channels": in_channels},
    }
    return Network(meta, Sequential(items))


register_builder("mnist_dwsep", build_mnist_dwsep)
register_builder("vgg_small", build_vgg_small)
