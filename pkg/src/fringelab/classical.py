"""Reference demodulators: N-step phase shifting, Fourier-transform and windowed-Fourier methods."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.fft


class ValidationError(ValueError):
    """Bad input shapes or values."""


class ConfigurationError(ValueError):
    """Demodulator parameters that cannot produce a result."""


def wrap(phase):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(phase, dtype=np.float64), 2 * np.pi)


@dataclass
class PhaseField:
    values: np.ndarray
    wrapped: bool = True
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValidationError("phase field must be 2-D")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.values.shape:
            raise ValidationError("validity mask shape differs from phase shape")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PhasorField:
    """Numerator/denominator pair whose four-quadrant arctangent is the phase.

    ``scale_c`` is the algorithm constant linking the pair to the fringe
    amplitude: ``M = c*B*sin(phi)``, ``D = c*B*cos(phi)``.
    """

    numerator: np.ndarray
    denominator: np.ndarray
    scale_c: float = 1.0

    def __post_init__(self):
        self.numerator = np.asarray(self.numerator, dtype=np.float64)
        self.denominator = np.asarray(self.denominator, dtype=np.float64)
        if self.numerator.shape != self.denominator.shape:
            raise ValidationError("numerator and denominator differ in shape")
        if not self.scale_c > 0:
            raise ValidationError("scale_c must be positive")

    def modulation(self) -> np.ndarray:
        """Fringe amplitude B recovered as |(M, D)| / c."""
        return np.hypot(self.numerator, self.denominator) / self.scale_c


@dataclass
class WftParams:
    window_sigma: float = 3.0
    freq_lo_x: float = math.pi / 2 - 0.8
    freq_hi_x: float = math.pi / 2 + 0.8
    freq_lo_y: float = -0.8
    freq_hi_y: float = 0.8
    freq_step: float = 0.1
    threshold: float = 6.0

    def __post_init__(self):
        if not (self.freq_lo_x < self.freq_hi_x and self.freq_lo_y < self.freq_hi_y):
            raise ValidationError("frequency bands need lo < hi")
        if not self.freq_step > 0:
            raise ValidationError("freq_step must be positive")
        if not self.window_sigma > 0:
            raise ValidationError("window_sigma must be positive")
        if not self.threshold >= 0:
            raise ValidationError("threshold must be non-negative")

    @classmethod
    def around_carrier(cls, carrier_f: float, width: int, halfband: float = 0.8, **kw) -> "WftParams":
        """Band of +/- ``halfband`` rad/px around a horizontal carrier of ``carrier_f`` fringes per width."""
        wx = 2 * math.pi * carrier_f / width
        return cls(freq_lo_x=wx - halfband, freq_hi_x=wx + halfband,
                   freq_lo_y=-halfband, freq_hi_y=halfband, **kw)


def _check_stack(stack) -> np.ndarray:
    frames = [np.asarray(f, dtype=np.float64) for f in stack]
    if len(frames) < 3:
        raise ValidationError(f"phase shifting needs at least 3 frames, got {len(frames)}")
    shape = frames[0].shape
    if len(shape) != 2 or any(f.shape != shape for f in frames):
        raise ValidationError("frames must be equal-size 2-D images")
    return np.stack(frames)


def phase_shifts(n_steps: int) -> np.ndarray:
    return 2 * np.pi * np.arange(n_steps) / n_steps


def ps_background(stack) -> np.ndarray:
    frames = _check_stack(stack)
    return frames.mean(axis=0)


def ps_phasor(stack) -> PhasorField:
    frames = _check_stack(stack)
    n = len(frames)
    delta = phase_shifts(n)
    num = np.tensordot(np.sin(delta), frames, axes=1)
    den = np.tensordot(np.cos(delta), frames, axes=1)
    return PhasorField(num, den, scale_c=n / 2)


def phase_from_phasor(p: PhasorField) -> PhaseField:
    """Four-quadrant arctangent of (M, D) in (-pi, pi].

    Pixels with M = D = 0 carry no phase; they get 0 and are marked invalid.
    """
    valid = (p.numerator != 0) | (p.denominator != 0)
    phi = np.arctan2(p.numerator, p.denominator)
    phi[phi == -np.pi] = np.pi
    phi[~valid] = 0.0
    return PhaseField(phi, wrapped=True, valid=valid)


def ps_phase(stack) -> PhaseField:
    return phase_from_phasor(ps_phasor(stack))


def dft2(img) -> np.ndarray:
    """Unitary 2-D DFT (any size; numpy's pocketfft handles mixed radix)."""
    return np.fft.fft2(np.asarray(img), norm="ortho")


def idft2(spectrum) -> np.ndarray:
    return np.fft.ifft2(np.asarray(spectrum), norm="ortho")


def _raised_cosine(dist, half_width, taper):
    w = np.zeros_like(dist, dtype=np.float64)
    flat = max(half_width - taper, 0.0)
    w[dist <= flat] = 1.0
    edge = (dist > flat) & (dist < half_width)
    if taper > 0:
        w[edge] = 0.5 * (1 + np.cos(np.pi * (dist[edge] - flat) / taper))
    return w


def ft_window(shape, carrier_f: float, bandwidth: float, taper: float = 4.0) -> np.ndarray:
    """Band-pass in DFT-bin units around the +1 order (kx = +carrier_f, ky = 0)."""
    h, w = shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    wx = _raised_cosine(np.abs(kx - carrier_f), bandwidth, taper)
    wy = _raised_cosine(np.abs(ky), bandwidth, taper)
    return np.outer(wy, wx) * (kx > 0)[None, :]


def ft_demod(fringe, carrier_f: float, bandwidth: float = 20.0, taper: float = 4.0) -> PhasorField:
    """Fourier-transform demodulation of a single carrier fringe.

    Keeps the +1 spectral order and returns the imaginary/real parts of
    the filtered complex field ``(B/2) exp(i phi_total)`` with c = 0.5.
    """
    img = np.asarray(fringe, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("fringe must be 2-D")
    if bandwidth <= 0 or carrier_f < bandwidth:
        raise ConfigurationError(
            f"carrier lobe at {carrier_f} bins overlaps DC for bandwidth {bandwidth}")
    z = idft2(dft2(img) * ft_window(img.shape, carrier_f, bandwidth, taper))
    return PhasorField(z.imag, z.real, scale_c=0.5)


def _freq_grid(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(max(n, 0))


def wft_demod(fringe, params: WftParams | None = None) -> PhasorField:
    """Windowed Fourier filtering restricted to a one-sided frequency band.

    Each candidate frequency's Gaussian-windowed coefficients are zeroed
    below ``params.threshold`` and the survivors are synthesized back;
    the result approximates ``(B/2) exp(i phi_total)``.
    """
    params = params or WftParams()
    img = np.asarray(fringe, dtype=np.float64)
    if img.ndim != 2:
        raise ValidationError("fringe must be 2-D")
    wxs = _freq_grid(params.freq_lo_x, params.freq_hi_x, params.freq_step)
    wys = _freq_grid(params.freq_lo_y, params.freq_hi_y, params.freq_step)
    if wxs.size == 0 or wys.size == 0:
        raise ConfigurationError("empty WFT frequency grid")

    h, w = img.shape
    half = int(math.ceil(3 * params.window_sigma))
    ph, pw = scipy.fft.next_fast_len(h + 2 * half), scipy.fft.next_fast_len(w + 2 * half)
    padded = np.zeros((ph, pw))
    padded[:h, :w] = img
    spec = scipy.fft.fft2(padded)

    t = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-t ** 2 / (2 * params.window_sigma ** 2))
    g1 /= np.sqrt(np.sum(g1 ** 2))

    def kernel_spectra(freqs, n):
        # circularly placed 1-D windows, one row per modulation frequency
        k = np.zeros((len(freqs), n), dtype=np.complex128)
        k[:, t.astype(int) % n] = g1[None, :] * np.exp(1j * np.outer(freqs, t))
        return scipy.fft.fft(k, axis=1)

    kx = kernel_spectra(wxs, pw)
    ky = kernel_spectra(wys, ph)
    acc = np.zeros((ph, pw), dtype=np.complex128)
    for iy in range(len(wys)):
        kernels = ky[iy][None, :, None] * kx[:, None, :]
        sf = scipy.fft.ifft2(spec[None] * kernels, axes=(1, 2))
        sf[np.abs(sf) < params.threshold] = 0
        acc += np.sum(scipy.fft.fft2(sf, axes=(1, 2)) * kernels, axis=0)
    z = scipy.fft.ifft2(acc)[:h, :w] * params.freq_step ** 2 / (4 * math.pi ** 2)
    return PhasorField(z.imag, z.real, scale_c=0.5)
