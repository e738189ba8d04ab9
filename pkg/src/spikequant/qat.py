"""Uniform activation quantization with a learnable clipping threshold.

A b-bit quantizer maps x to one of 2^b levels k * s / (2^b - 1) for
k = 0 .. 2^b - 1, where s is the clipping threshold learned alongside the
weights.  Rounding is round-half-up, implemented literally as
floor(u + 0.5).  That choice is load-bearing: the spiking integrator in
:mod:`spikequant.snn_sim` preloads half a threshold into the membrane and
then floors, so both paths take the same branch on every input, ties
included.

Weight quantization (symmetric, 2^bits - 1 signed levels) and the
activation-percentile threshold baselines used for comparison live here
too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import REAL, as_real


@dataclass
class QuantSpec:
    """Static description of one quantizer: bit width and clipping threshold."""

    bits: int
    clip: float = 1.0
    target: str = "activation"

    def __post_init__(self):
        if int(self.bits) < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        self.bits = int(self.bits)
        if not (self.clip > 0):
            raise ValueError(f"clip threshold must be > 0, got {self.clip}")
        if self.target not in ("activation", "weight"):
            raise ValueError(f"unknown quantization target {self.target!r}")

    @property
    def levels(self) -> int:
        return 2 ** self.bits

    @property
    def steps(self) -> int:
        """Number of non-zero levels; doubles as the spike budget per window."""
        return 2 ** self.bits - 1


def round_half_up(u: np.ndarray) -> np.ndarray:
    # floor(u + 0.5), NOT banker's rounding: 0.5 -> 1, 1.5 -> 2, 2.5 -> 3.
    return np.floor(u + REAL(0.5))


def quantize_activation(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Clip to [0, s] and snap to the b-bit grid, rounding half up."""
    x = as_real(x)
    steps = REAL(spec.steps)
    s = REAL(spec.clip)
    k = np.clip(round_half_up(x * (steps / s)), REAL(0.0), steps)
    return (k * (s / steps)).astype(REAL, copy=False)


def quantize_activation_floor(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Flooring form of the same quantizer: floor(u + 1/2) instead of round.

    This is how the spiking path realizes the quantizer (half a threshold
    preloaded, then floor).  It must agree with :func:`quantize_activation`
    bit for bit on every input; a dedicated acceptance check sweeps this.
    """
    x = as_real(x)
    steps = REAL(spec.steps)
    s = REAL(spec.clip)
    k = np.clip(np.floor(x * (steps / s) + REAL(0.5)), REAL(0.0), steps)
    return (k * (s / steps)).astype(REAL, copy=False)


def quantize_backward(upstream: np.ndarray, x: np.ndarray, spec: QuantSpec):
    """Straight-through gradients for the activation quantizer.

    grad_x passes the upstream gradient inside the clipping window
    (0 <= x <= s, both ends inclusive) and blocks it outside; grad_clip
    collects the upstream gradient wherever x overflows the threshold
    (x > s), which is what pulls s toward covering the activation range.
    """
    upstream = as_real(upstream)
    x = as_real(x)
    s = REAL(spec.clip)
    inside = (x >= REAL(0.0)) & (x <= s)
    grad_x = np.where(inside, upstream, REAL(0.0))
    grad_clip = upstream[x > s].sum(dtype=REAL)
    return grad_x, np.asarray(grad_clip, dtype=REAL)


def quantize_weights(w: np.ndarray, bits: int) -> np.ndarray:
    """Symmetric uniform weight quantization to 2^bits - 1 signed levels.

    The grid is k * max|w| / (2^(bits-1) - 1) for k in
    [-(2^(bits-1) - 1), +(2^(bits-1) - 1)]; an all-zero tensor is returned
    unchanged.  Idempotent: quantizing a quantized tensor is a no-op.
    """
    if int(bits) < 2:
        raise ValueError(f"weight quantization needs bits >= 2, got {bits}")
    w = as_real(w)
    kmax = REAL(2 ** (int(bits) - 1) - 1)
    scale = np.abs(w).max()
    if scale == 0:
        return w.copy()
    delta = (scale / kmax).astype(REAL)
    k = np.clip(round_half_up(w / delta), -kmax, kmax)
    return (k * delta).astype(REAL, copy=False)


@dataclass
class BaselineThresholdConfig:
    """How to pick a firing threshold from observed activations instead of s."""

    mode: str = "max"       # "max" or "percentile"
    percentile: float = 99.0

    def __post_init__(self):
        if self.mode not in ("max", "percentile"):
            raise ValueError(f"unknown threshold mode {self.mode!r}")
        if not (0.0 < self.percentile <= 100.0):
            raise ValueError(f"percentile must be in (0, 100], got {self.percentile}")


def estimate_baseline_threshold(acts: np.ndarray, cfg: BaselineThresholdConfig) -> float:
    """Threshold from a batch of activations: max, or nearest-rank percentile.

    Nearest-rank: sort the flattened batch ascending and return the element
    at 1-based rank ceil(p/100 * n).  No interpolation.
    """
    flat = as_real(acts).ravel()
    if flat.size == 0:
        raise ValueError("cannot estimate a threshold from an empty batch")
    if cfg.mode == "max":
        return float(flat.max())
    ranked = np.sort(flat)
    rank = math.ceil(cfg.percentile / 100.0 * ranked.size)
    rank = min(max(rank, 1), ranked.size)
    return float(ranked[rank - 1])
