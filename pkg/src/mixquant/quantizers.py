"""Fake-quantization operators: quantize on the forward pass, pass the
gradient straight through (masked outside the clip range) on the way back.

Weights only; activations stay full precision. Two operator kinds:

* binary with a per-tensor scale s = mean(|w|), output s * sign(w)
* symmetric affine on 2^bits - 1 levels, scale max(|w|) / (2^(bits-1) - 1)

Both are exactly idempotent: re-deriving the scale from an already
quantized tensor reproduces it bit for bit (the affine scale is always
the correctly rounded quotient of a representable max by the level
count; the binary scale of a constant-magnitude tensor is taken from
the constant directly rather than re-averaged).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

KIND_BINARY = "binary"
KIND_AFFINE = "affine"
FLOAT_BITS = 32  # unquantized baseline payload per weight


@dataclass(frozen=True)
class QuantCandidate:
    """One quantization option a layer may choose.

    `clip` is the straight-through pass range: gradients flow only where
    |w| <= clip. Binary candidates default to 1.0 (weights are clipped to
    [-1, 1] after each update); affine candidates default to +inf, which
    is equivalent to clipping at max|w|.
    """

    bits: int
    kind: str
    clip: float

    def __post_init__(self):
        if self.kind not in (KIND_BINARY, KIND_AFFINE):
            raise ValueError(f"unknown quantizer kind: {self.kind!r}")
        if (self.bits == 1) != (self.kind == KIND_BINARY):
            raise ValueError(
                f"bits={self.bits} requires kind "
                f"{'binary' if self.bits == 1 else 'affine'}, got {self.kind!r}"
            )
        if self.kind == KIND_AFFINE and not 2 <= self.bits <= 32:
            raise ValueError(f"affine bits must be in [2, 32], got {self.bits}")
        if not self.clip > 0:
            raise ValueError(f"clip must be > 0, got {self.clip}")

    @classmethod
    def binary(cls, clip: float = 1.0) -> "QuantCandidate":
        return cls(1, KIND_BINARY, clip)

    @classmethod
    def affine(cls, bits: int, clip: float = math.inf) -> "QuantCandidate":
        return cls(bits, KIND_AFFINE, clip)

    @property
    def label(self) -> str:
        return "binary" if self.kind == KIND_BINARY else f"{self.bits}-bit"

    @property
    def levels(self) -> int:
        """Representable values: 2 for binary, 2^bits - 1 centered at zero."""
        return 2 if self.kind == KIND_BINARY else 2 ** self.bits - 1

    def to_dict(self) -> dict:
        return {"bits": self.bits, "kind": self.kind, "clip": self.clip}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantCandidate":
        return cls(int(d["bits"]), str(d["kind"]), float(d["clip"]))


def quantize_binary(w: np.ndarray) -> np.ndarray:
    """s * sign(w) with s = mean(|w|) over the whole tensor; sign(0) = +1."""
    if w.size == 0:
        raise ValueError("cannot quantize an empty tensor")
    magnitudes = np.abs(w)
    lo = magnitudes.min()
    hi = magnitudes.max()
    # mean of a constant array, computed exactly (keeps re-quantization a no-op)
    s = float(lo) if lo == hi else float(magnitudes.mean())
    return np.where(w >= 0, s, -s)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_affine(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric per-tensor quantization onto 2^bits - 1 levels."""
    if not 2 <= bits <= 32:
        raise ValueError(f"affine bits must be in [2, 32], got {bits}")
    levels_half = 2 ** (bits - 1) - 1
    peak = np.max(np.abs(w))
    if peak == 0:
        return np.zeros_like(w)
    scale = peak / levels_half
    return _round_half_away(w / scale) * scale


def quantize(w: np.ndarray, candidate: QuantCandidate) -> np.ndarray:
    if candidate.kind == KIND_BINARY:
        return quantize_binary(w)
    return quantize_affine(w, candidate.bits)


def ste_backward(upstream: np.ndarray, w: np.ndarray, clip: float) -> np.ndarray:
    """Straight-through gradient: upstream where |w| <= clip, else zero."""
    if upstream.shape != w.shape:
        raise ValueError(
            f"upstream shape {upstream.shape} does not match weights {w.shape}"
        )
    return upstream * (np.abs(w) <= clip)


def fake_quantize(w: Tensor, candidate: QuantCandidate) -> Tensor:
    """Quantized forward value of `w` with the straight-through backward."""
    out_data = quantize(w.data, candidate)

    def backward(g: np.ndarray) -> None:
        w._accumulate(ste_backward(g, w.data, candidate.clip))

    return Tensor(out_data, w.requires_grad, (w,),
                  backward if w.requires_grad else None, f"fq[{candidate.label}]")


def payload_bits(candidate: QuantCandidate, param_count: int) -> int:
    """Stored weight payload in bits: bits per weight times weight count.

    Scales, biases and batch-norm parameters are excluded; this is the
    accounting under which uniform 8-bit is exactly 4x and binary 32x.
    """
    if param_count < 0:
        raise ValueError(f"param_count must be >= 0, got {param_count}")
    return candidate.bits * param_count
