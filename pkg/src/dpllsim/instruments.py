"""Measurement tools that attach to a simulated loop: swept-sine network analyzer,
square-wave dither lock-in, zero dead-time frequency counter, phase-noise PSD,
and a converter SNR check.

Instruments talk to the thing under test through a small handle protocol: an
object with an ``fs`` attribute and ``respond(stimulus) -> (response, saturated)``.
Every call is an independent run starting from the same initial state, which
is what lets sweep points execute in parallel and still be deterministic.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Protocol, Sequence

import numpy as np
from scipy import signal

from .dsp_core import NCO_MODULUS, nco_accumulators, nco_frequency, tuning_word
from .numerics import TWO_PI, enob
from .sim_engine import CHUNK, Engine, SimConfig


class System(Protocol):
    fs: float

    def respond(self, stimulus: np.ndarray) -> tuple[np.ndarray, bool]:
        ...


# system handles ----------------------------------------------------------------

@dataclass
class LtiSystem:
    """Discrete transfer function b(z^-1)/a(z^-1) applied with ``lfilter``."""

    fs: float
    b: Sequence[float] = (1.0,)
    a: Sequence[float] = (1.0,)

    def respond(self, stimulus):
        return signal.lfilter(self.b, self.a, stimulus), False

    def response(self, f):
        _, h = signal.freqz(self.b, self.a, worN=np.atleast_1d(f), fs=self.fs)
        return h


@dataclass
class DelaySystem:
    """Pure delay, rounded to whole samples."""

    fs: float
    tau: float

    @property
    def samples(self) -> int:
        return int(round(self.tau * self.fs))

    def respond(self, stimulus):
        x = np.asarray(stimulus, dtype=float)
        d = min(self.samples, x.size)
        return np.concatenate((np.zeros(d), x[: x.size - d])), False


@dataclass
class GainNoiseSystem:
    """Static gain (Hz/V) plus seeded white measurement noise (Hz rms per sample)."""

    fs: float
    gain: float
    noise_rms: float = 0.0
    seed: int = 0

    def respond(self, stimulus):
        x = np.asarray(stimulus, dtype=float)
        y = self.gain * x
        if self.noise_rms:
            gen = np.random.Generator(np.random.Philox(self.seed))
            y = y + self.noise_rms * gen.standard_normal(x.size)
        return y, False


class SimSystem:
    """Wraps a ``SimConfig`` as a handle on one channel.

    mode ``"open"``: the channel's loop filter is disabled; the response is the
    detected frequency in Hz, so response/stimulus is the actuator-to-detector
    gain in Hz/V. mode ``"closed"``: the loop runs; the response is the channel
    output (stimulus included), so response/stimulus is the sensitivity S.
    """

    def __init__(self, cfg: SimConfig, mode: str = "open", channel: int = 0,
                 chunk: int = CHUNK):
        if mode not in ("open", "closed"):
            raise ValueError(f"mode must be 'open' or 'closed', not {mode!r}")
        channels = list(cfg.channels)
        if mode == "open":
            channels[channel] = replace(channels[channel], loop_closed=False)
        point = "phase_increment" if mode == "open" else "dac_out"
        self.cfg = replace(cfg, channels=tuple(channels), recorded_testpoints={point})
        self.mode = mode
        self.channel = channel
        self.point = point
        self.chunk = chunk
        self.fs = cfg.fs

    def respond(self, stimulus):
        x = np.asarray(stimulus, dtype=float)
        eng = Engine(self.cfg)
        C = len(self.cfg.channels)
        out = np.empty(x.size)
        for start in range(0, x.size, self.chunk):
            stop = min(start + self.chunk, x.size)
            stim = np.zeros((C, stop - start))
            stim[self.channel] = x[start:stop]
            out[start:stop] = eng.advance(stop - start, stim)[(self.channel, self.point)]
        if self.mode == "open":
            out *= self.fs / TWO_PI
        return out, eng.saturated


# network analyzer ----------------------------------------------------------------

@dataclass
class VnaResult:
    freqs: np.ndarray
    response: np.ndarray
    excitation_amplitude: float
    cycles_per_point: int
    saturated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.response = np.asarray(self.response, dtype=complex)
        if self.saturated is None:
            self.saturated = np.zeros(self.freqs.size, dtype=bool)
        if self.freqs.shape != self.response.shape:
            raise ValueError("freqs and response must have the same length")
        if np.any(np.diff(self.freqs) <= 0):
            raise ValueError("freqs must be strictly increasing")

    @property
    def mag_db(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return 20.0 * np.log10(np.abs(self.response))

    @property
    def phase_deg(self) -> np.ndarray:
        return np.rad2deg(np.angle(self.response))

    @property
    def any_saturated(self) -> bool:
        return bool(np.any(self.saturated))


def log_freqs(f_lo: float, f_hi: float, n: int = 50) -> np.ndarray:
    if not 0 < f_lo < f_hi:
        raise ValueError("need 0 < f_lo < f_hi")
    return np.geomspace(f_lo, f_hi, n)


def _vna_point(system: System, f: float, amplitude: float, cycles: int, settle: int):
    fs = system.fs
    n_settle = int(math.ceil(settle * fs / f))
    n_int = max(int(round(cycles * fs / f)), 8)
    n = np.arange(n_settle + n_int)
    x = amplitude * np.sin(TWO_PI * f / fs * n)
    y, sat = system.respond(x)
    w = signal.windows.hann(n_int, sym=False)
    ref = w * np.exp(-1j * TWO_PI * f / fs * n[n_settle:])
    h = np.dot(np.asarray(y)[n_settle:], ref) / np.dot(x[n_settle:], ref)
    return complex(h), bool(sat)


def vna_sweep(system: System, freqs, amplitude: float = 0.01, cycles_per_point: int = 100,
              settle_cycles: int = 20, workers: int = 1) -> VnaResult:
    """Swept-sine transfer function measurement.

    At each frequency a sinusoid is added at the controller output, the first
    ``settle_cycles`` periods are discarded and the next ``cycles_per_point``
    periods of stimulus and response are demodulated with the same Hann-windowed
    reference; the point is their complex ratio. Points are independent runs, so
    ``workers > 1`` only changes wall-clock time, not results.
    """
    freqs = np.asarray(freqs, dtype=float)
    if freqs.size == 0:
        raise ValueError("no frequencies given")
    if np.any(freqs <= 0) or np.any(freqs >= system.fs / 2):
        raise ValueError("every sweep frequency must lie in (0, fs/2)")
    if not amplitude > 0:
        raise ValueError("amplitude must be positive")
    if cycles_per_point < 1 or settle_cycles < 0:
        raise ValueError("cycles_per_point must be >= 1 and settle_cycles >= 0")

    def point(f):
        return _vna_point(system, float(f), amplitude, cycles_per_point, settle_cycles)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(point, freqs))
    else:
        results = [point(f) for f in freqs]
    return VnaResult(freqs, [r[0] for r in results], amplitude, cycles_per_point,
                     np.array([r[1] for r in results], dtype=bool))


# dither lock-in --------------------------------------------------------------------

RELIABLE_CONFIDENCE = 1.0 / 3.0


@dataclass(frozen=True)
class DitherEstimate:
    gain: float        # Hz/V, signed
    confidence: float  # relative standard error of the gain
    dither_freq: float
    dither_amplitude: float
    phase: float = 0.0  # rad, response phase at the dither fundamental

    @property
    def reliable(self) -> bool:
        return self.confidence <= RELIABLE_CONFIDENCE


def square_wave(freq: float, amplitude: float, n: int, fs: float) -> np.ndarray:
    """+A for the first half of each NCO cycle, -A for the second."""
    acc = nco_accumulators(tuning_word(freq, fs), n)
    return np.where(acc < np.uint64(NCO_MODULUS // 2), amplitude, -amplitude)


def dither_estimate(system: System, dither_freq: float = 1e3, dither_amplitude: float = 0.01,
                    duration: float = 0.05, settle_periods: int = 5,
                    blocks: int = 10) -> DitherEstimate:
    """Estimate the controlled system's gain and sign with a square-wave dither.

    The measured signal is demodulated at the dither fundamental and divided by
    the square wave's fundamental, (4/pi) * amplitude. The sign comes from the
    in-phase part of that ratio. Confidence is the spread of ``blocks`` equal
    sub-record estimates (standard error of their mean) relative to |gain|.
    """
    fs = system.fs
    if not 0 < dither_freq < fs / 2:
        raise ValueError("dither frequency must lie in (0, fs/2)")
    if not dither_amplitude > 0:
        raise ValueError("dither amplitude must be positive")
    if blocks < 2:
        raise ValueError("need at least two blocks")
    f_true = nco_frequency(tuning_word(dither_freq, fs), fs)
    period = fs / f_true
    per_block = max(int(duration * f_true) // blocks, 1)
    n_block = int(round(per_block * period))
    n_settle = int(round(settle_periods * period))
    n = n_settle + blocks * n_block
    x = square_wave(dither_freq, dither_amplitude, n, fs)
    y, _ = system.respond(x)
    y = np.asarray(y, dtype=float)[n_settle:].reshape(blocks, n_block)
    ref = np.exp(-1j * TWO_PI * f_true / fs * np.arange(n_settle, n)).reshape(blocks, n_block)
    fundamental = -1j * 4.0 / math.pi * dither_amplitude
    ratios = 2.0 * np.mean(y * ref, axis=1) / fundamental
    mean = complex(np.mean(ratios))
    se = float(np.sqrt(np.sum(np.abs(ratios - mean) ** 2) / (blocks * (blocks - 1))))
    mag = abs(mean)
    gain = math.copysign(mag, mean.real) if mag else 0.0
    conf = se / mag if mag else math.inf
    return DitherEstimate(gain, conf, dither_freq, dither_amplitude, math.atan2(mean.imag, mean.real))


# zero dead-time counter -----------------------------------------------------------

_SPLIT = 1 << 26


def _exact_sum(x: np.ndarray) -> Fraction:
    """Exact rational sum of float64 values (no rounding anywhere)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return Fraction(0)
    if not np.all(np.isfinite(x)):
        raise ValueError("phase increments must be finite")
    m, e = np.frexp(x)
    mant = (m * 2.0**53).astype(np.int64)  # exact: |m| < 1
    hi, lo = np.divmod(mant, _SPLIT)
    exps, inv = np.unique(e, return_inverse=True)
    total = 0
    base = int(exps.min()) - 53
    # each partial sum stays far below 2**53, so float accumulation is exact
    step = 1 << 24
    for s in range(0, x.size, step):
        sl = slice(s, s + step)
        sh = np.bincount(inv[sl], weights=hi[sl].astype(float), minlength=exps.size)
        sl_ = np.bincount(inv[sl], weights=lo[sl].astype(float), minlength=exps.size)
        for k, ex in enumerate(exps):
            v = int(sh[k]) * _SPLIT + int(sl_[k])
            if v:
                total += v << (int(ex) - 53 - base)
    return Fraction(total) * Fraction(2) ** base


@dataclass(frozen=True)
class CounterRecord:
    gate_index: int
    mean_freq: float          # Hz
    gate_time: float = 1.0    # s
    phase_sum: float = 0.0    # rad accumulated inside the gate
    cumulative_phase: float = 0.0  # rad since the counter started


class FrequencyCounter:
    """Gates of exactly ``round(gate_time * fs)`` samples, back to back.

    Phase is accumulated exactly, so the sum over gates equals the total phase
    of the stream however it was chunked.
    """

    def __init__(self, fs: float, gate_time: float = 1.0):
        n = gate_time * fs
        if not gate_time > 0 or abs(n - round(n)) > 1e-6 * max(n, 1.0) or round(n) < 1:
            raise ValueError("gate_time * fs must be a positive whole number of samples")
        self.fs = fs
        self.gate_time = gate_time
        self.gate_samples = int(round(n))
        self.next_gate = 0
        self.filled = 0
        self._gate = Fraction(0)
        self._cum = Fraction(0)

    @property
    def pending_samples(self) -> int:
        return self.filled

    def update(self, increments) -> list[CounterRecord]:
        x = np.asarray(increments, dtype=float).ravel()
        out = []
        pos = 0
        while pos < x.size:
            take = min(self.gate_samples - self.filled, x.size - pos)
            self._gate += _exact_sum(x[pos:pos + take])
            self.filled += take
            pos += take
            if self.filled == self.gate_samples:
                self._cum += self._gate
                ph = float(self._gate)
                # exact mean increment times fs / 2pi, rounded once
                hz = self._gate * Fraction(self.fs) / (self.gate_samples * Fraction(TWO_PI))
                out.append(CounterRecord(self.next_gate, float(hz), self.gate_time, ph,
                                         float(self._cum)))
                self.next_gate += 1
                self.filled = 0
                self._gate = Fraction(0)
        return out


def counter_update(state: FrequencyCounter, increments) -> list[CounterRecord]:
    """Feed phase increments (rad/sample); returns the gates completed by this call."""
    return state.update(increments)


# PSD ---------------------------------------------------------------------------------

PSD_KINDS = ("phase", "frequency", "phase_increment")


@dataclass
class PsdResult:
    freqs: np.ndarray
    phase_psd: np.ndarray         # rad^2/Hz
    freq_psd: np.ndarray          # Hz^2/Hz
    integrated_phase: np.ndarray  # rad, from each frequency up to the top bin
    segment_count: int


def psd_estimate(stream, fs: float, segment_length: int = 4096, kind: str = "phase") -> PsdResult:
    """One-sided Welch PSD (Hann, 50% overlap), without the DC bin.

    ``kind`` says what the stream is: phase in rad, frequency in Hz, or phase
    increments in rad/sample. The other PSD follows from S_nu = f^2 S_phi.
    """
    x = np.asarray(stream, dtype=float)
    if kind not in PSD_KINDS:
        raise ValueError(f"kind must be one of {PSD_KINDS}")
    if segment_length < 2:
        raise ValueError("segment_length must be >= 2")
    if x.size < 2 * segment_length:
        raise ValueError(f"stream of {x.size} samples is shorter than 2 segments of {segment_length}")
    if kind == "phase_increment":
        x = x * (fs / TWO_PI)
    f, p = signal.welch(x, fs=fs, window="hann", nperseg=segment_length,
                        noverlap=segment_length // 2, scaling="density")
    f, p = f[1:], p[1:]
    if kind == "phase":
        phase_psd, freq_psd = p, p * f**2
    else:
        freq_psd, phase_psd = p, p / f**2
    df = fs / segment_length
    integrated = np.sqrt(np.cumsum(phase_psd[::-1])[::-1] * df)
    segments = 1 + (x.size - segment_length) // (segment_length - segment_length // 2)
    return PsdResult(f, phase_psd, freq_psd, integrated, segments)


# converter SNR ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdcMeasurement:
    snr_t: float        # dB, whole Nyquist band
    enob: float
    spectral_snr: float  # dB inside ``band`` Hz centred on the tone
    band: float
    amplitude: float


def measure_adc(samples, fs: float, f0: float, band: float = 7.5e6,
                segment_length: int = 1 << 14) -> AdcMeasurement:
    """Sine fit at known frequency ``f0``; the residual gives the time-domain SNR
    and, through its Welch PSD over ``band``, the in-band SNR."""
    x = np.asarray(samples, dtype=float)
    n = np.arange(x.size)
    basis = np.column_stack((np.cos(TWO_PI * f0 / fs * n), np.sin(TWO_PI * f0 / fs * n), np.ones(x.size)))
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    resid = x - basis @ coef
    p_sig = 0.5 * (coef[0] ** 2 + coef[1] ** 2)
    snr_t = 10.0 * math.log10(p_sig / np.mean(resid**2))
    f, p = signal.welch(resid, fs=fs, window="hann", nperseg=segment_length,
                        noverlap=segment_length // 2, scaling="density")
    sel = np.abs(f - f0) <= band / 2
    noise = float(np.sum(p[sel])) * fs / segment_length
    return AdcMeasurement(snr_t, enob(snr_t), 10.0 * math.log10(p_sig / noise), band,
                          math.hypot(coef[0], coef[1]))
