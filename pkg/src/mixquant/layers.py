"""Minimal layer/module system on top of the autodiff tensor.

Modules own parameters (Tensors with requires_grad) and buffers (plain
ndarrays such as batch-norm running statistics). Attribute order gives a
deterministic parameter ordering; lists of modules are walked too.
"""

from __future__ import annotations

import numpy as np

from . import nn_ops
from .tensor import Tensor


class Module:
    def __init__(self):
        self.training = True

    # ------------------------------------------------------------------
    # traversal

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    # ------------------------------------------------------------------
    # state

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(
                f"state mismatch: missing={missing}, unexpected={unexpected}"
            )
        for name, p in self.named_parameters():
            if p.data.shape != state[name].shape:
                raise ValueError(
                    f"shape mismatch for {name}: {p.data.shape} vs {state[name].shape}"
                )
            p.data = state[name].astype(np.float64).copy()
        for name, b in self.named_buffers():
            b[...] = state[name]

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError


def _he_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.weight = Tensor(
            _he_init(rng, (in_features, out_features), in_features),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x: Tensor, weight: Tensor) -> Tensor:
        return x @ weight


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.weight = Tensor(
            _he_init(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x: Tensor, weight: Tensor) -> Tensor:
        return nn_ops.conv2d(x, weight, self.stride, self.padding)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng()
        self.stride = stride
        self.padding = padding
        self.weight = Tensor(
            _he_init(rng, (channels, 1, kernel, kernel), kernel * kernel),
            requires_grad=True,
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x: Tensor, weight: Tensor) -> Tensor:
        return nn_ops.depthwise_conv2d(x, weight, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel normalization for dense (N, C) or conv (N, C, H, W) outputs."""

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.9):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.track_running = True  # search loops pause tracking on probe passes
        self.gamma = Tensor(np.ones(num_features), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features), requires_grad=True)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum,
            training=self.training, update_running=self.track_running,
        )


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.relu()


class MaxPool2d(Module):
    def __init__(self, k: int):
        super().__init__()
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.max_pool2d(x, self.k)


class AvgPool2d(Module):
    def __init__(self, k: int):
        super().__init__()
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        return nn_ops.avg_pool2d(x, self.k)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.mean(axis=(2, 3))


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.flatten2d()


class Sequential(Module):
    def __init__(self, items: list[Module]):
        super().__init__()
        self.items = list(items)

    def forward(self, x: Tensor) -> Tensor:
        for item in self.items:
            x = item(x)
        return x


class QuantDecision(Module):
    """Common surface of a quantizable layer across its three lives:
    full precision, relaxed candidate mixture, and discretized.

    `layer` owns the master weights; `kind` is one of "conv",
    "depthwise-conv", "dense".
    """

    def __init__(self, name: str, layer: Module, kind: str):
        super().__init__()
        self.name = name
        self.kind = kind
        self.layer = layer

    @property
    def weight(self) -> Tensor:
        return self.layer.weight

    @property
    def weight_count(self) -> int:
        return int(np.prod(self.layer.weight.shape))


class QuantUnit(QuantDecision):
    """A weight-carrying layer paired with its batch norm.

    This is the granularity at which bitwidths are assigned: the search
    replaces the unit's forward with a candidate mixture, keeping one
    normalization branch per candidate.
    """

    def __init__(self, name: str, layer: Module, bn: BatchNorm, kind: str):
        super().__init__(name, layer, kind)
        self.bn = bn

    def forward(self, x: Tensor) -> Tensor:
        return self.bn(self.layer(x))
