"""Differentiable mixed-precision search.

Each quantizable layer gets a row of architecture logits, one per
bitwidth candidate. The layer's forward becomes a softmax-weighted sum
of its per-candidate branches (quantized weights, then that branch's own
batch norm). The expected payload size is differentiable in the logits,
and a two-valued Lagrange multiplier switches the validation-loss
constraint in and out, following the alternating schedule:

    repeat: a few weight-descent steps on the training split;
            set the multiplier to 0 if the validation loss is within
            tolerance, else to its cap;
            one logit-descent step on size + multiplier * (loss - tol).

Discretization takes each layer's argmax candidate (ties break toward
fewer bits); fine-tuning then retrains the frozen-assignment model.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .data import BatchIterator, Dataset, full_batches
from .layers import BatchNorm, Module, QuantDecision, QuantUnit
from .models import LayerSpec, Network
from .nn_ops import accuracy, softmax_cross_entropy
from .optim import SGD, cosine_lr
from .quantizers import FLOAT_BITS, QuantCandidate, fake_quantize
from .tensor import Tensor, softmax


class SearchDivergence(RuntimeError):
    """Raised when a loss goes non-finite; carries whatever was logged."""

    def __init__(self, message: str, state: "SearchState | None" = None):
        super().__init__(message)
        self.state = state


class ArchLogits:
    """Per-layer continuous scores over the candidate set."""

    def __init__(self, rows: list[Tensor], candidates: list[QuantCandidate]):
        for row in rows:
            if row.shape != (len(candidates),):
                raise ValueError(
                    f"logit row shape {row.shape} vs {len(candidates)} candidates"
                )
        self.rows = rows
        self.candidates = list(candidates)

    @classmethod
    def uniform(cls, n_layers: int, candidates: list[QuantCandidate]) -> "ArchLogits":
        rows = [Tensor(np.zeros(len(candidates)), requires_grad=True)
                for _ in range(n_layers)]
        return cls(rows, candidates)

    def probabilities(self) -> list[np.ndarray]:
        return [softmax(Tensor(row.data)).data for row in self.rows]


class RelaxedUnit(QuantDecision):
    """Mixture of quantization candidates over one layer (the relaxed form).

    Every candidate branch owns a batch norm initialized from the
    pretrained unit's, so branches on different scales compete fairly.
    """

    def __init__(self, unit: QuantUnit, candidates: list[QuantCandidate],
                 alpha_row: Tensor):
        super().__init__(unit.name, unit.layer, unit.kind)
        if alpha_row.shape != (len(candidates),):
            raise ValueError(
                f"{unit.name}: {len(candidates)} candidates vs logit row "
                f"of shape {alpha_row.shape}"
            )
        self.candidates = list(candidates)
        self.bns = [copy.deepcopy(unit.bn) for _ in candidates]
        # tuple-wrapped so the module walker does not treat the shared
        # logit row as a unit parameter (the search steps it separately)
        self._alpha = (alpha_row,)

    @property
    def alpha(self) -> Tensor:
        return self._alpha[0]

    @property
    def binary_clip(self) -> float | None:
        clips = [c.clip for c in self.candidates if c.kind == "binary"]
        return min(clips) if clips else None

    def forward(self, x: Tensor) -> Tensor:
        return mix_forward(x, self)


def mix_forward(x: Tensor, unit: RelaxedUnit) -> Tensor:
    """Probability-weighted sum of normalized candidate branches."""
    probs = softmax(unit.alpha)
    out = None
    for j, cand in enumerate(unit.candidates):
        wq = fake_quantize(unit.layer.weight, cand)
        branch = unit.bns[j](unit.layer.forward_with_weight(x, wq))
        term = probs[j] * branch
        out = term if out is None else out + term
    return out


class DiscreteUnit(QuantDecision):
    """One layer frozen to a single candidate, with its retained batch norm."""

    def __init__(self, name: str, layer: Module, kind: str,
                 candidate: QuantCandidate, bn: BatchNorm):
        super().__init__(name, layer, kind)
        self.candidate = candidate
        self.bn = bn

    @property
    def binary_clip(self) -> float | None:
        return self.candidate.clip if self.candidate.kind == "binary" else None

    def forward(self, x: Tensor) -> Tensor:
        wq = fake_quantize(self.layer.weight, self.candidate)
        return self.bn(self.layer.forward_with_weight(x, wq))


@dataclass(frozen=True)
class Assignment:
    """A discrete bitwidth choice per layer, with exact size accounting."""

    indices: tuple
    candidates: tuple
    layer_params: tuple  # weight count per layer, aligned with indices

    def __post_init__(self):
        if len(self.indices) != len(self.layer_params):
            raise ValueError("one index per layer required")
        for i in self.indices:
            if not 0 <= i < len(self.candidates):
                raise ValueError(f"candidate index {i} out of range")

    @classmethod
    def build(cls, indices, candidates, specs: list[LayerSpec]) -> "Assignment":
        return cls(tuple(int(i) for i in indices), tuple(candidates),
                   tuple(s.params for s in specs))

    @property
    def bits_per_layer(self) -> tuple:
        return tuple(self.candidates[i].bits for i in self.indices)

    @property
    def payload_bits(self) -> int:
        return sum(b * n for b, n in zip(self.bits_per_layer, self.layer_params))

    @property
    def float_bits(self) -> int:
        return FLOAT_BITS * sum(self.layer_params)

    @property
    def compression_rate(self) -> float:
        return self.float_bits / self.payload_bits

    def labels(self) -> tuple:
        return tuple(self.candidates[i].label for i in self.indices)


@dataclass
class TrajectoryRow:
    iteration: int
    train_loss: float
    valid_loss: float
    lam: float
    expected_size_bits: float
    probabilities: tuple  # per layer, tuple of candidate probabilities


@dataclass
class SearchState:
    theta: float
    lambda_max: float
    rows: list = field(default_factory=list)
    converged: bool = False

    def log(self, row: TrajectoryRow) -> None:
        if row.lam not in (0.0, self.lambda_max):
            raise ValueError(f"multiplier {row.lam} outside the two-valued schedule")
        self.rows.append(row)

    def lambda_flips(self) -> int:
        lams = [r.lam for r in self.rows]
        return sum(a != b for a, b in zip(lams, lams[1:]))


@dataclass
class SearchConfig:
    candidates: list = field(
        default_factory=lambda: [QuantCandidate.binary(), QuantCandidate.affine(8)]
    )
    theta: float | None = None  # None: use full-precision validation loss
    lambda_max: float = 1e3
    lr_w: float = 0.01
    momentum: float = 0.9
    lr_alpha: float = 0.5
    alpha_step_clip: float = 1.0  # max per-step logit change
    t_w: int = 5  # weight steps per outer iteration
    max_outer: int = 150
    batch_size: int = 64
    converge_prob: float = 0.95
    converge_patience: int = 5
    seed: int = 0
    augment: bool = False


@dataclass
class SearchResult:
    arch: ArchLogits
    state: SearchState
    model: Network  # the relaxed model after the last step
    theta: float


def relax_network(model: Network, candidates: list[QuantCandidate]):
    """Copy `model`, replacing each quantizable unit by its mixture form."""
    relaxed = copy.deepcopy(model)
    units = [m for m in relaxed.body.items if isinstance(m, QuantUnit)]
    arch = ArchLogits.uniform(len(units), candidates)
    row_iter = iter(arch.rows)
    relaxed.body.items = [
        RelaxedUnit(m, candidates, next(row_iter)) if isinstance(m, QuantUnit) else m
        for m in relaxed.body.items
    ]
    return relaxed, arch


def discretize(arch: ArchLogits, specs: list[LayerSpec]) -> Assignment:
    """Argmax per layer; exact ties break toward fewer bits."""
    indices = []
    for row in arch.rows:
        top = row.data.max()
        tied = np.flatnonzero(row.data == top)
        indices.append(min(tied, key=lambda j: (arch.candidates[j].bits, j)))
    return Assignment.build(indices, arch.candidates, specs)


def discretize_network(model: Network, assignment: Assignment) -> Network:
    """Freeze each unit to its assigned candidate, keeping that branch's
    batch norm (relaxed units) or the unit's own (plain units)."""
    out = copy.deepcopy(model)
    units = [m for m in out.body.items if isinstance(m, QuantDecision)]
    if len(units) != len(assignment.indices):
        raise ValueError(
            f"assignment covers {len(assignment.indices)} layers, "
            f"model has {len(units)}"
        )
    replaced = []
    unit_idx = 0
    for m in out.body.items:
        if not isinstance(m, QuantDecision):
            replaced.append(m)
            continue
        j = assignment.indices[unit_idx]
        cand = assignment.candidates[j]
        bn = m.bns[j] if isinstance(m, RelaxedUnit) else m.bn
        replaced.append(DiscreteUnit(m.name, m.layer, m.kind, cand, bn))
        unit_idx += 1
    out.body.items = replaced
    return out


def expected_size(arch: ArchLogits, specs: list[LayerSpec]) -> Tensor:
    """Differentiable expected payload: sum_i n_i * sum_j p_ij * bits_j."""
    if len(arch.rows) != len(specs):
        raise ValueError(f"{len(arch.rows)} logit rows vs {len(specs)} specs")
    bits = Tensor(np.array([float(c.bits) for c in arch.candidates]))
    total = None
    for row, spec in zip(arch.rows, specs):
        contrib = (softmax(row) * bits).sum() * float(spec.params)
        total = contrib if total is None else total + contrib
    return total


def update_lambda(valid_loss: float, theta: float, lambda_max: float) -> float:
    """Two-valued multiplier: 0 while the loss constraint holds, else the cap."""
    if lambda_max <= 0:
        raise ValueError(f"lambda_max must be > 0, got {lambda_max}")
    if not math.isfinite(valid_loss):
        raise SearchDivergence(f"validation loss diverged: {valid_loss}")
    return 0.0 if valid_loss - theta <= 0 else lambda_max


def _clip_binary_weights(model) -> None:
    if not hasattr(model, "quant_units"):
        return
    for unit in model.quant_units():
        clip = getattr(unit, "binary_clip", None)
        if clip is not None and math.isfinite(clip):
            np.clip(unit.weight.data, -clip, clip, out=unit.weight.data)


def weight_step(model, batch, optimizer: SGD, loss_fn=None) -> float:
    """One descent step on weights and batch-norm affines; logits frozen.

    Master weights of binary-candidate layers are clipped back into the
    straight-through range after the update.
    """
    x, y = batch
    model.train()
    optimizer.zero_grad()
    logits = model(x if isinstance(x, Tensor) else Tensor(x))
    loss = loss_fn(logits, y) if loss_fn else softmax_cross_entropy(logits, y)
    value = float(loss.data)
    if not math.isfinite(value):
        raise SearchDivergence(f"training loss diverged: {value}")
    loss.backward()
    optimizer.step()
    _clip_binary_weights(model)
    return value


def _set_running_tracking(model: Module, flag: bool) -> None:
    for m in model.modules():
        if isinstance(m, BatchNorm):
            m.track_running = flag


def relaxed_valid_loss(model: Network, batch) -> Tensor:
    """Validation-batch loss of the relaxed model, batch statistics,
    without disturbing the running averages."""
    x, y = batch
    model.train()
    _set_running_tracking(model, False)
    try:
        loss = softmax_cross_entropy(model(Tensor(x)), y)
    finally:
        _set_running_tracking(model, True)
    return loss


def alpha_step(
    model: Network,
    arch: ArchLogits,
    specs: list[LayerSpec],
    batch,
    lam: float,
    theta: float,
    lr_alpha: float,
    step_clip: float = 1.0,
    loss_tensor: Tensor | None = None,
) -> float:
    """One descent step on the logits against size + lam * (loss - theta).

    The size term is measured as a fraction of the float32 payload so
    the capped multiplier dominates it by orders of magnitude when the
    constraint is violated. Weights receive no update; their incidental
    gradients are discarded. Returns the expected size (bits) after the
    step.
    """
    for row in arch.rows:
        row.grad = None
    model.zero_grad()

    float_payload = FLOAT_BITS * sum(s.params for s in specs)
    objective = expected_size(arch, specs) * (1.0 / float_payload)
    if lam > 0:
        if loss_tensor is None:
            loss_tensor = relaxed_valid_loss(model, batch)
        objective = objective + lam * (loss_tensor - theta)
    objective.backward()

    deltas = [lr_alpha * row.grad if row.grad is not None else None
              for row in arch.rows]
    # cap the largest logit change while keeping the update direction, so
    # a capped multiplier jolts loss-critical layers without flattening
    # the relative pressure on the others
    peak = max((np.max(np.abs(d)) for d in deltas if d is not None), default=0.0)
    scale = 1.0 if peak <= step_clip else step_clip / peak
    for row, delta in zip(arch.rows, deltas):
        if delta is None:
            continue
        row.data = row.data - scale * delta
        row.grad = None
    model.zero_grad()
    return float(expected_size(arch, specs).data)


def evaluate(model: Network, dataset: Dataset, batch_size: int = 256):
    """(mean loss, accuracy) over a dataset in eval mode."""
    model.eval()
    total_loss = 0.0
    total_correct = 0.0
    for x, y in full_batches(dataset, batch_size):
        logits = model(Tensor(x))
        total_loss += float(softmax_cross_entropy(logits, y).data) * len(y)
        total_correct += accuracy(logits.data, y) * len(y)
    n = len(dataset)
    return total_loss / n, total_correct / n


def search(model: Network, train_set: Dataset, valid_set: Dataset,
           cfg: SearchConfig) -> SearchResult:
    """Run the alternating search from a pretrained full-precision model."""
    for ds in (train_set, valid_set):
        if ds.split == "test":
            raise ValueError("the test split must never reach the search")

    if cfg.theta is not None:
        theta = cfg.theta
    else:
        theta, _ = evaluate(model, valid_set, cfg.batch_size)

    relaxed, arch = relax_network(model, cfg.candidates)
    specs = relaxed.layer_specs()
    # the logit rows live outside the module tree, so this is weights + BN only
    optimizer = SGD(relaxed.parameters(), cfg.lr_w, cfg.momentum)

    train_iter = BatchIterator(train_set, cfg.batch_size, seed=cfg.seed,
                               augment=cfg.augment)
    valid_iter = BatchIterator(valid_set, cfg.batch_size, seed=cfg.seed + 1)

    state = SearchState(theta=theta, lambda_max=cfg.lambda_max)
    total_w_steps = cfg.max_outer * cfg.t_w
    saturated_streak = 0

    for outer in range(cfg.max_outer):
        train_loss = math.nan
        try:
            for t in range(cfg.t_w):
                optimizer.lr = cosine_lr(cfg.lr_w, outer * cfg.t_w + t, total_w_steps)
                train_loss = weight_step(relaxed, next(train_iter), optimizer)

            vbatch = next(valid_iter)
            vloss_tensor = relaxed_valid_loss(relaxed, vbatch)
            valid_loss = float(vloss_tensor.data)
            lam = update_lambda(valid_loss, theta, cfg.lambda_max)
            size_bits = alpha_step(
                relaxed, arch, specs, vbatch, lam, theta,
                cfg.lr_alpha, cfg.alpha_step_clip,
                loss_tensor=vloss_tensor if lam > 0 else None,
            )
        except SearchDivergence as e:
            raise SearchDivergence(str(e), state) from e

        probs = tuple(tuple(p) for p in arch.probabilities())
        state.log(TrajectoryRow(outer, train_loss, valid_loss, lam,
                                size_bits, probs))

        if all(max(p) > cfg.converge_prob for p in probs):
            saturated_streak += 1
            if saturated_streak >= cfg.converge_patience:
                state.converged = True
                break
        else:
            saturated_streak = 0

    return SearchResult(arch=arch, state=state, model=relaxed, theta=theta)


def fine_tune(model: Network, train_set: Dataset, epochs: int,
              lr: float = 0.01, momentum: float = 0.9, batch_size: int = 64,
              seed: int = 0, augment: bool = False) -> list[float]:
    """Train a frozen-assignment model; returns per-epoch mean losses."""
    optimizer = SGD(model.parameters(), lr, momentum)
    it = BatchIterator(train_set, batch_size, seed=seed, augment=augment)
    steps_per_epoch = max(1, (len(train_set) + batch_size - 1) // batch_size)
    history = []
    for epoch in range(epochs):
        losses = []
        for step, batch in enumerate(it.epoch()):
            optimizer.lr = cosine_lr(lr, epoch * steps_per_epoch + step,
                                     epochs * steps_per_epoch)
            losses.append(weight_step(model, batch, optimizer))
        history.append(float(np.mean(losses)))
    return history


def train_full_precision(model: Network, train_set: Dataset, epochs: int,
                         lr: float = 0.01, momentum: float = 0.9,
                         batch_size: int = 64, seed: int = 0,
                         augment: bool = False) -> list[float]:
    """Plain supervised pretraining; same loop as fine_tune, no quantizers."""
    return fine_tune(model, train_set, epochs, lr, momentum, batch_size,
                     seed, augment)
