"""Two-frequency temporal phase unwrapping."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .classical import PhaseField, ValidationError


@dataclass
class FrequencyPair:
    """Wrapped high-frequency phase plus a low-frequency anchor.

    With ``f_low == 1`` a single fringe spans the field, so the low map is
    absolute once shifted to [0, 2pi). For ``f_low > 1`` the low map must
    already be unwrapped. Fringe orders are reliable while the low-map
    phase noise stays below ``pi * f_low / f_high``.
    """

    f_high: float
    f_low: float
    phase_high: PhaseField
    phase_low: PhaseField

    def __post_init__(self):
        if not self.f_high > self.f_low >= 1:
            raise ValidationError(f"need f_high > f_low >= 1, got {self.f_high}, {self.f_low}")
        if self.phase_high.shape != self.phase_low.shape:
            raise ValidationError("high and low phase maps differ in shape")
        if not self.phase_high.wrapped:
            raise ValidationError("high-frequency phase must be wrapped")
        if self.f_low != 1 and self.phase_low.wrapped:
            raise ValidationError("low-frequency phase must be absolute unless f_low == 1")

    @property
    def noise_bound(self) -> float:
        return np.pi * self.f_low / self.f_high


@dataclass
class UnwrapResult:
    phase: PhaseField
    order: np.ndarray
    residual: np.ndarray
    warning: str | None = None


def absolute_low(pair: FrequencyPair) -> np.ndarray:
    low = pair.phase_low.values
    if pair.f_low == 1 and pair.phase_low.wrapped:
        return np.mod(low, 2 * np.pi)
    return low


def unwrap_with_order(pair: FrequencyPair, mask=None, max_residual: float = 0.49,
                      max_bad_fraction: float = 0.01) -> UnwrapResult:
    """Unwrap and keep the fringe-order map and rounding residual (in cycles)."""
    scaled = absolute_low(pair) * (pair.f_high / pair.f_low)
    cycles = (scaled - pair.phase_high.values) / (2 * np.pi)
    order = np.rint(cycles)
    residual = cycles - order
    phase = pair.phase_high.values + 2 * np.pi * order
    valid = pair.phase_high.valid & pair.phase_low.valid
    region = valid if mask is None else valid & np.asarray(mask, dtype=bool)
    message = None
    if region.any():
        bad = np.mean(np.abs(residual[region]) > max_residual)
        if bad > max_bad_fraction:
            message = (f"fringe-order residual above {max_residual} cycles on "
                       f"{100 * bad:.1f}% of masked pixels")
    return UnwrapResult(PhaseField(phase, wrapped=False, valid=valid), order.astype(np.int64),
                        residual, message)


def temporal_unwrap(pair: FrequencyPair, mask=None) -> PhaseField:
    """Absolute high-frequency phase ``phi_h + 2pi * round((Phi_l * f_h/f_l - phi_h) / 2pi)``."""
    res = unwrap_with_order(pair, mask)
    if res.warning:
        warnings.warn(res.warning, RuntimeWarning, stacklevel=2)
    return res.phase
