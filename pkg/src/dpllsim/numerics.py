"""Fixed-point formats, quantization, phase wrapping and converter SNR bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class FixedFormat:
    """Integer word of ``total_bits`` bits whose LSB is worth ``scale`` engineering units."""

    total_bits: int
    signed: bool = True
    scale: float = 1.0

    def __post_init__(self):
        if not 1 <= self.total_bits <= 64:
            raise ValueError(f"total_bits must be in 1..64, got {self.total_bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")

    @property
    def min_code(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def max_code(self) -> int:
        if self.signed:
            return (1 << (self.total_bits - 1)) - 1
        return (1 << self.total_bits) - 1

    def to_real(self, code):
        return np.asarray(code, dtype=float) * self.scale


@dataclass(frozen=True)
class AdcSpec:
    snr_t: float  # dB over 0..fs/2
    bits: int = 14
    fs: float = 125e6

    def __post_init__(self):
        ideal = 6.02 * self.bits + 1.76
        if self.snr_t > ideal + 1e-9:
            raise ValueError(f"snr_t={self.snr_t} dB exceeds the ideal {self.bits}-bit quantizer ({ideal:.2f} dB)")
        if self.fs <= 0:
            raise ValueError("fs must be positive")


def quantize(x, fmt: FixedFormat):
    """Round half-even to the nearest code and saturate to the format range.

    Accepts a scalar (returns ``int``) or an array (returns ``int64`` array).
    """
    scaled = np.rint(np.asarray(x, dtype=float) / fmt.scale)  # rint is half-even
    code = np.clip(scaled, fmt.min_code, fmt.max_code)
    if np.ndim(code) == 0:
        return int(code)
    return code.astype(np.int64)


def wrap_phase(x):
    """Map radians onto the half-open interval [-pi, pi)."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ValueError("wrap_phase requires finite input")
    out = np.mod(arr + math.pi, TWO_PI) - math.pi
    # np.mod can return exactly 2*pi for tiny negative inputs
    out = np.where(out >= math.pi, out - TWO_PI, out)
    if out.ndim == 0:
        return float(out)
    return out


def spectral_snr(spec: AdcSpec, bw: float) -> float:
    """SNR seen in a ``bw`` Hz band given the time-domain SNR over the full Nyquist band."""
    if not 0 < bw <= spec.fs / 2:
        raise ValueError(f"bandwidth {bw} Hz outside (0, fs/2]")
    return spec.snr_t + 10.0 * math.log10(spec.fs / (2.0 * bw))


def enob(snr_t: float) -> float:
    return (snr_t - 1.76) / 6.02


def ideal_snr(bits: int) -> float:
    return 6.02 * bits + 1.76
