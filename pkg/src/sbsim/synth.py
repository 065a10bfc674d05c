"""Synthetic operand tensors with calibrated element sparsity.

Activations in real networks are heavy-tailed and, after the usual
nonlinearities, zero-inflated.  The generator draws from a symmetric
distribution, applies the activation in float, then picks the
quantization scale so a requested fraction of elements rounds to zero:
with q = round(v * scale), that fraction is exactly the share of |v|
below 0.5 / scale, so the scale comes from the matching quantile.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .sbr import QuantTensor


class SynthError(ValueError):
    pass


class Distribution(Enum):
    LAPLACE = "laplace"
    GAUSSIAN = "gaussian"


class Activation(Enum):
    NONE = "none"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    ELU = "elu"


LEAKY_SLOPE = 0.1
ZERO_FRACTION_TOLERANCE = 0.02


@dataclass(frozen=True)
class SynthInfo:
    scale: float
    achieved_zero_fraction: float


def _draw(rng: np.random.Generator, dist: Distribution, shape: tuple[int, ...]):
    if dist is Distribution.LAPLACE:
        return rng.laplace(0.0, 1.0, size=shape)
    return rng.normal(0.0, 1.0, size=shape)


def _activate(v: np.ndarray, act: Activation) -> np.ndarray:
    if act is Activation.NONE:
        return v
    if act is Activation.RELU:
        return np.maximum(v, 0.0)
    if act is Activation.LEAKY_RELU:
        return np.where(v > 0, v, LEAKY_SLOPE * v)
    return np.where(v > 0, v, np.expm1(v))


def _quantize(v: np.ndarray, scale: float, precision: int) -> np.ndarray:
    limit = (1 << (precision - 1)) - 1
    q = np.rint(v * scale).astype(np.int64)
    return np.clip(q, -limit, limit)


def generate_synthetic_tensor(
    shape: tuple[int, ...],
    precision: int,
    *,
    distribution: Distribution = Distribution.LAPLACE,
    activation: Activation = Activation.NONE,
    zero_fraction: float | None = 0.05,
    scale: float | None = None,
    seed: int = 0,
) -> tuple[QuantTensor, SynthInfo]:
    """Draw, activate, calibrate, quantize.

    Either ``zero_fraction`` (calibrated, verified to +/- 2 points) or an
    explicit ``scale`` must be given.  Calibration fails loudly when the
    activation already zeroes more elements than requested, or when the
    resulting integers are too coarse to slice meaningfully.
    """
    if precision < 2 or precision > 31:
        raise SynthError("precision must be in [2, 31]")
    rng = np.random.default_rng(seed)
    v = _activate(_draw(rng, distribution, tuple(shape)), activation)

    if scale is None:
        if zero_fraction is None:
            raise SynthError("need either zero_fraction or scale")
        if not 0.0 <= zero_fraction < 1.0:
            raise SynthError("zero_fraction must lie in [0, 1)")
        cutoff = float(np.quantile(np.abs(v), zero_fraction))
        if cutoff <= 0.0:
            raise SynthError(
                "cannot calibrate: the activation already zeroes more than "
                f"{zero_fraction:.1%} of elements"
            )
        scale = 0.5 / cutoff
        q = _quantize(v, scale, precision)
        achieved = float(np.mean(q == 0))
        if abs(achieved - zero_fraction) > ZERO_FRACTION_TOLERANCE:
            scale, q, achieved = _search_scale(v, zero_fraction, scale, precision)
    else:
        if scale <= 0:
            raise SynthError("scale must be positive")
        q = _quantize(v, scale, precision)
        achieved = float(np.mean(q == 0))

    if int(np.max(np.abs(q))) < 2:
        raise SynthError("quantized values are degenerate: increase the scale")
    if zero_fraction is not None and abs(achieved - zero_fraction) > ZERO_FRACTION_TOLERANCE:
        raise SynthError(
            f"calibration missed: wanted {zero_fraction:.3f}, got {achieved:.3f}"
        )
    return QuantTensor(values=q, precision=precision), SynthInfo(scale, achieved)


def _search_scale(
    v: np.ndarray, target: float, start: float, precision: int
) -> tuple[float, np.ndarray, float]:
    """Bisect on the scale: the zero fraction decreases monotonically in it."""
    lo, hi = start / 16.0, start * 16.0
    best = (start, _quantize(v, start, precision))
    for _ in range(64):
        mid = (lo + hi) / 2.0
        q = _quantize(v, mid, precision)
        achieved = float(np.mean(q == 0))
        if abs(achieved - target) < abs(float(np.mean(best[1] == 0)) - target):
            best = (mid, q)
        if achieved > target:
            lo = mid
        else:
            hi = mid
    scale, q = best
    return scale, q, float(np.mean(q == 0))
