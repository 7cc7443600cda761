"""Demodulation front end: 48-bit NCO, I/Q mixer, selectable low-pass, phase detector.

Everything here works either one sample at a time (``nco_step``, ``IqLowpass.step``,
``phase_extract``) or on whole blocks (``demodulate_block``); both paths produce
the same numbers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np
from scipy import signal

from .numerics import TWO_PI, wrap_phase

NCO_BITS = 48
NCO_MODULUS = 1 << NCO_BITS
NCO_MASK = NCO_MODULUS - 1
REFERENCE_FS = 125e6


class SignalLoss(ValueError):
    """I and Q are both zero, so no phase can be extracted."""


class LpfSelect(enum.Enum):
    """The three demodulator bandwidths, named by their value at a 125 MS/s clock."""

    BW_3_75MHZ = 3.75e6
    BW_15_5MHZ = 15.5e6
    BW_31MHZ = 31e6

    def cutoff(self, fs: float) -> float:
        return self.value * fs / REFERENCE_FS

    @classmethod
    def parse(cls, text) -> "LpfSelect":
        if isinstance(text, cls):
            return text
        aliases = {"3.75": cls.BW_3_75MHZ, "15.5": cls.BW_15_5MHZ, "31": cls.BW_31MHZ}
        key = str(text).strip().lower().removesuffix("mhz").strip()
        if key in aliases:
            return aliases[key]
        try:
            hz = float(text)
        except ValueError:
            raise ValueError(f"unknown low-pass selection {text!r}") from None
        for member in cls:
            if math.isclose(hz, member.value):
                return member
        raise ValueError(f"unknown low-pass selection {text!r}")


@dataclass(frozen=True)
class NcoState:
    accumulator: int
    k: int
    f_clk: float
    lut_bits: int | None = None  # None: full-precision sin/cos

    def __post_init__(self):
        if not 0 <= self.accumulator < NCO_MODULUS:
            raise ValueError("accumulator must be a 48-bit unsigned value")
        if not 0 <= self.k < NCO_MODULUS:
            raise ValueError("tuning word must be a 48-bit unsigned value")

    @property
    def frequency(self) -> float:
        return self.k / NCO_MODULUS * self.f_clk


@dataclass(frozen=True)
class IqSample:
    i: float
    q: float
    t_index: int = 0


def tuning_word(f_ref: float, f_clk: float) -> int:
    """Nearest 48-bit word k with k/2**48 * f_clk ~= f_ref (exact rational rounding)."""
    if not 0 <= f_ref < f_clk:
        raise ValueError(f"f_ref={f_ref} Hz must satisfy 0 <= f_ref < f_clk={f_clk} Hz")
    k = round(Fraction(f_ref) / Fraction(f_clk) * NCO_MODULUS)
    return min(k, NCO_MASK)


def nco_frequency(k: int, f_clk: float) -> float:
    return float(Fraction(k, NCO_MODULUS) * Fraction(f_clk))


def _lut(bits: int) -> np.ndarray:
    return np.sin(TWO_PI * np.arange(1 << bits) / (1 << bits))


def nco_phase(accumulator: int, lut_bits: int | None = None) -> float:
    if lut_bits is not None:
        accumulator = (accumulator >> (NCO_BITS - lut_bits)) << (NCO_BITS - lut_bits)
    return TWO_PI * (accumulator / NCO_MODULUS)


def nco_outputs(accumulator: int, lut_bits: int | None = None) -> tuple[float, float]:
    if lut_bits is None:
        theta = nco_phase(accumulator)
        return math.cos(theta), math.sin(theta)
    table = _lut(lut_bits)
    size = 1 << lut_bits
    idx = accumulator >> (NCO_BITS - lut_bits)
    return float(table[(idx + size // 4) % size]), float(table[idx])


def nco_step(state: NcoState) -> tuple[NcoState, float, float]:
    """Emit cos/sin of the current accumulator, then advance it by k (mod 2**48)."""
    cos_out, sin_out = nco_outputs(state.accumulator, state.lut_bits)
    nxt = replace(state, accumulator=(state.accumulator + state.k) & NCO_MASK)
    return nxt, cos_out, sin_out


def nco_accumulators(k: int, n: int, start: int = 0) -> np.ndarray:
    """Accumulator values for ``n`` consecutive samples, as exact uint64."""
    idx = np.arange(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        acc = (np.uint64(start) + idx * np.uint64(k)) & np.uint64(NCO_MASK)
    return acc


def nco_block(k: int, n: int, start: int = 0, lut_bits: int | None = None):
    """Vectorized ``nco_step``: returns (cos, sin, next_accumulator)."""
    acc = nco_accumulators(k, n, start)
    if lut_bits is not None:
        acc = (acc >> np.uint64(NCO_BITS - lut_bits)) << np.uint64(NCO_BITS - lut_bits)
    theta = TWO_PI * (acc.astype(np.float64) / NCO_MODULUS)
    nxt = (start + n * k) & NCO_MASK
    if lut_bits is None:
        return np.cos(theta), np.sin(theta), nxt
    table = _lut(lut_bits)
    size = 1 << lut_bits
    idx = (acc >> np.uint64(NCO_BITS - lut_bits)).astype(np.int64)
    return table[(idx + size // 4) % size], table[idx], nxt


def iq_demodulate(x, cos_out, sin_out, t_index: int = 0):
    """Mix a real sample down by the NCO: i = x cos, q = -x sin.

    The minus sign makes the product x * exp(-j theta), so an input
    ``cos(theta + phi)`` yields baseband phase ``+phi``.
    """
    if np.ndim(x) == 0:
        return IqSample(float(x * cos_out), float(-x * sin_out), t_index)
    x = np.asarray(x, dtype=float)
    return x * cos_out, -x * sin_out


def lpf_sos(sel: LpfSelect, fs: float, order: int = 4) -> np.ndarray:
    """Butterworth low-pass as second-order sections (bilinear, pre-warped)."""
    fc = sel.cutoff(fs)
    return signal.butter(order, fc, btype="low", fs=fs, output="sos")


def lpf_group_delay_dc(sel: LpfSelect, fs: float) -> float:
    """Group delay at DC in seconds."""
    b, a = signal.sos2tf(lpf_sos(sel, fs))
    _, gd = signal.group_delay((b, a), w=[1e-6], fs=1.0)
    return float(gd[0]) / fs


def lpf_response(sel: LpfSelect, fs: float, f) -> np.ndarray:
    _, h = signal.sosfreqz(lpf_sos(sel, fs), worN=np.atleast_1d(np.asarray(f, float)), fs=fs)
    return h


class IqLowpass:
    """Per-sample I/Q low-pass; two identical cascades of transposed direct-form-II biquads."""

    def __init__(self, sel: LpfSelect, fs: float):
        self.sel = sel
        self.fs = fs
        self.sos = lpf_sos(sel, fs)
        self.zi = np.zeros((2, self.sos.shape[0], 2))  # [i/q, section, state]

    def reset(self):
        self.zi[:] = 0.0

    def _run(self, branch: int, x: float) -> float:
        z = self.zi[branch]
        for s, (b0, b1, b2, _, a1, a2) in enumerate(self.sos):
            y = b0 * x + z[s, 0]
            z[s, 0] = b1 * x - a1 * y + z[s, 1]
            z[s, 1] = b2 * x - a2 * y
            x = y
        return x

    def step(self, sample: IqSample) -> IqSample:
        return IqSample(self._run(0, sample.i), self._run(1, sample.q), sample.t_index)


def lowpass_step(state: IqLowpass, sample: IqSample, sel: LpfSelect | None = None) -> IqSample:
    if sel is not None and sel is not state.sel:
        raise ValueError("filter state was built for a different bandwidth")
    return state.step(sample)


def phase_extract(s: IqSample) -> float:
    """Four-quadrant arctangent of (q, i), mapped to [-pi, pi)."""
    if s.i == 0.0 and s.q == 0.0:
        raise SignalLoss("zero-magnitude I/Q sample")
    phi = math.atan2(s.q, s.i)
    return -math.pi if phi == math.pi else phi


def phase_increment(phi_now: float, phi_prev: float) -> float:
    return wrap_phase(phi_now - phi_prev)


@dataclass
class DemodResult:
    i: np.ndarray
    q: np.ndarray
    phase: np.ndarray
    increment: np.ndarray
    signal_loss: np.ndarray  # bool per sample


def demodulate_block(x, f_ref: float, fs: float, sel: LpfSelect = LpfSelect.BW_31MHZ,
                     start_accumulator: int = 0, lut_bits: int | None = None) -> DemodResult:
    """Run a whole record through NCO mix, low-pass, arctangent and wrapped difference.

    Starts from zero filter state and a previous phase of zero. Samples with
    zero I/Q magnitude hold the previous phase and are flagged.
    """
    x = np.asarray(x, dtype=float)
    k = tuning_word(f_ref, fs)
    c, s, _ = nco_block(k, x.size, start_accumulator, lut_bits)
    i_raw, q_raw = iq_demodulate(x, c, s)
    sos = lpf_sos(sel, fs)
    i = signal.sosfilt(sos, i_raw)
    q = signal.sosfilt(sos, q_raw)
    loss = (i == 0.0) & (q == 0.0)
    phase = np.arctan2(q, i)
    phase[phase == math.pi] = -math.pi
    if loss.any():
        # hold last good phase through signal-loss samples
        idx = np.where(~loss, np.arange(x.size), -1)
        np.maximum.accumulate(idx, out=idx)
        phase = np.where(idx >= 0, phase[np.maximum(idx, 0)], 0.0)
    prev = np.concatenate(([0.0], phase[:-1]))
    return DemodResult(i, q, phase, wrap_phase(phase - prev), loss)
