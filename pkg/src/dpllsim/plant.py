"""Everything outside the controller: DAC and VCO output mappings, delays, the
AOM + fiber link, the open-loop DC gain, and seeded noise sources.
"""

from __future__ import annotations

import csv
import enum
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .numerics import TWO_PI, FixedFormat, quantize

VCO_WORD_BITS = 16
VCO_MAX_CODE = (1 << VCO_WORD_BITS) - 1


@dataclass(frozen=True)
class VcoSpec:
    enabled: bool = False
    full_scale: float = 62.5e6  # frequency of code 2**16-1
    word_bits: int = VCO_WORD_BITS
    quiescent_offset: float = 0.0  # Hz
    amplitude: float = 1.0  # DAC full-scale fraction of the generated tone
    dc_offset: float = 0.0  # V

    @property
    def max_code(self) -> int:
        return (1 << self.word_bits) - 1

    @property
    def gain(self) -> float:
        """Hz per volt of loop-filter output (+-1 V spans the full word)."""
        return self.full_scale / 2.0

    @classmethod
    def for_fs(cls, fs: float, **kw) -> "VcoSpec":
        return cls(full_scale=fs / 2.0, **kw)


@dataclass(frozen=True)
class DacSpec:
    bits: int = 14
    v_min: float = -1.0
    v_max: float = 1.0

    @property
    def fmt(self) -> FixedFormat:
        return FixedFormat(self.bits, True, (self.v_max - self.v_min) / (1 << self.bits))


def vco_map(code: int, spec: VcoSpec = VcoSpec()) -> float:
    """16-bit VCO word to output frequency; 0 -> 0 Hz and 2**16-1 -> full scale."""
    if not 0 <= code <= spec.max_code:
        raise ValueError(f"VCO code {code} outside 0..{spec.max_code}")
    return code * spec.full_scale / spec.max_code


def vco_code(volts, spec: VcoSpec = VcoSpec()):
    """Loop-filter output (V) to VCO word, around the quiescent-frequency word."""
    center = spec.quiescent_offset / spec.full_scale * spec.max_code
    code = np.rint(center + np.asarray(volts, dtype=float) * spec.max_code / 2.0)
    code = np.clip(code, 0, spec.max_code).astype(np.int64)
    return int(code) if code.ndim == 0 else code


def dac_map(code: int, spec: DacSpec = DacSpec()) -> float:
    """Signed DAC code to output voltage, [-2**(b-1), 2**(b-1)-1] -> [v_min, v_max)."""
    fmt = spec.fmt
    if not fmt.min_code <= code <= fmt.max_code:
        raise ValueError(f"DAC code {code} outside {fmt.min_code}..{fmt.max_code}")
    mid = 0.5 * (spec.v_min + spec.v_max)
    return mid + code * fmt.scale


def dac_code(volts, spec: DacSpec = DacSpec()):
    return quantize(np.asarray(volts, dtype=float) - 0.5 * (spec.v_min + spec.v_max), spec.fmt)


class DelayLine:
    """Integer-sample delay; fractional delays round to the nearest sample."""

    def __init__(self, samples: int, initial: float = 0.0):
        if samples < 0:
            raise ValueError("delay must be non-negative")
        self.samples = samples
        self._buf = deque([initial] * samples, maxlen=samples) if samples else None

    @classmethod
    def from_seconds(cls, tau: float, fs: float) -> "DelayLine":
        return cls(int(round(tau * fs)))

    def step(self, x: float) -> float:
        if self._buf is None:
            return x
        y = self._buf[0]
        self._buf.append(x)
        return y

    def process(self, x) -> np.ndarray:
        return np.array([self.step(float(v)) for v in x])


def delay_step(state: DelayLine, x: float) -> float:
    return state.step(x)


def delay_response(f, tau: float):
    return np.exp(-1j * TWO_PI * np.asarray(f, dtype=float) * tau)


@dataclass(frozen=True)
class LinkModel:
    """AOM + fiber link of the noise-cancellation experiment.

    ``tau_link`` is the one-way fiber delay; with ``double_pass`` the local
    detector sees the round trip.
    """

    tau_link: float = 2.0e-6
    tau_aom: float = 1.5e-6
    tau_fpga: float = 0.5e-6
    kc: float = 1.0  # Hz/V, open-loop DC gain seen by the loop filter
    double_pass: bool = True
    actuator_lpf_hz: float = 0.0  # optional one-pole actuator roll-off, 0 = none

    def __post_init__(self):
        for name in ("tau_link", "tau_aom", "tau_fpga", "actuator_lpf_hz"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kc == 0:
            raise ValueError("kc must be non-zero")

    @property
    def total_delay(self) -> float:
        return total_latency([self.tau_link, self.tau_aom, self.tau_fpga])


class LinkShape(enum.Enum):
    COS2 = "cos2"              # e^{-jw tau} cos^2(w tau)
    ROUND_TRIP = "round_trip"  # e^{-jw tau} cos(w tau) = (1 + e^{-2jw tau})/2, causal


def link_response(f, m: LinkModel, aom_vco: Callable | None = None,
                  shape: LinkShape | str = LinkShape.COS2):
    """AOM+VCO response times fiber delay times the double-pass factor.

    ``aom_vco`` defaults to a unity-gain pure delay of ``m.tau_aom``. The
    FPGA latency and ``kc`` are not included.
    """
    f = np.asarray(f, dtype=float)
    shape = LinkShape(shape)
    h_av = aom_vco(f) if aom_vco is not None else delay_response(f, m.tau_aom)
    h = h_av * delay_response(f, m.tau_link)
    if m.double_pass:
        c = np.cos(TWO_PI * f * m.tau_link)
        h = h * (c * c if shape is LinkShape.COS2 else c)
    return complex(h) if np.ndim(h) == 0 else h


@dataclass
class MeasuredResponse:
    """Tabulated complex response, linearly interpolated in dB and unwrapped phase."""

    freq_hz: np.ndarray
    mag_db: np.ndarray
    phase_deg: np.ndarray

    def __call__(self, f):
        f = np.asarray(f, dtype=float)
        mag = np.interp(f, self.freq_hz, self.mag_db)
        ph = np.interp(f, self.freq_hz, np.rad2deg(np.unwrap(np.deg2rad(self.phase_deg))))
        return 10 ** (mag / 20) * np.exp(1j * np.deg2rad(ph))


def load_response_csv(path: str | Path) -> MeasuredResponse:
    """Read a freq_hz,mag_db,phase_deg CSV (header row required)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["freq_hz", "mag_db", "phase_deg"]:
            raise ValueError(f"{path}: expected header freq_hz,mag_db,phase_deg, got {header}")
        rows = [[float(v) for v in row] for row in reader if row]
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    if arr.shape[0] < 2 or np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError(f"{path}: need at least two rows with increasing freq_hz")
    return MeasuredResponse(arr[:, 0], arr[:, 1], arr[:, 2])


def total_latency(parts: Iterable[float] | dict) -> float:
    values = list(parts.values()) if isinstance(parts, dict) else list(parts)
    if any(p < 0 for p in values):
        raise ValueError("latencies must be >= 0")
    return math.fsum(values)


# noise -----------------------------------------------------------------------

class NoiseKind(enum.Enum):
    WHITE_PHASE = "white_phase"          # level: rad^2/Hz one-sided
    WHITE_FREQUENCY = "white_frequency"  # level: Hz^2/Hz one-sided
    ADC_SNR = "adc_snr"                  # level: dB relative to the carrier


class Injection(enum.Enum):
    LINK = "link"            # lumped at the remote end of the fiber
    DETECTION = "detection"  # added to the detected beat phase
    ACTUATOR = "actuator"    # VCO/AOM phase noise at the local end
    ADC = "adc"              # additive voltage noise at the converter


_DEFAULT_INJECTION = {NoiseKind.WHITE_PHASE: Injection.DETECTION,
                      NoiseKind.WHITE_FREQUENCY: Injection.LINK,
                      NoiseKind.ADC_SNR: Injection.ADC}


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind
    level: float
    seed: int = 0
    injection: Injection | None = None
    channel: int | None = None  # None: every plant

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.injection is None:
            object.__setattr__(self, "injection", _DEFAULT_INJECTION[self.kind])
        else:
            object.__setattr__(self, "injection", Injection(self.injection))
        if self.kind is not NoiseKind.ADC_SNR and self.level < 0:
            raise ValueError("noise level must be >= 0")
        if self.kind is NoiseKind.ADC_SNR and self.injection is not Injection.ADC:
            raise ValueError("adc_snr noise is injected at the ADC")


def gaussian_block(gen: np.random.Generator, n: int) -> np.ndarray:
    """Box-Muller on uniform pairs (cosine branch only, so blocks concatenate exactly)."""
    u = gen.random(2 * n).reshape(n, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1-u in (0, 1]
    return r * np.cos(TWO_PI * u[:, 1])


class NoiseSource:
    """Seeded stream for one ``NoiseSpec``; successive blocks continue the same realization."""

    def __init__(self, spec: NoiseSpec, fs: float, carrier_amplitude: float = 1.0,
                 base_seed: int | None = None):
        self.spec = spec
        self.fs = fs
        key = spec.seed if base_seed is None else np.random.SeedSequence([base_seed, spec.seed])
        self._gen = np.random.Generator(np.random.Philox(key))
        self._phase = 0.0
        if spec.kind is NoiseKind.ADC_SNR:
            self.sigma = math.sqrt(carrier_amplitude**2 / 2.0 / 10 ** (spec.level / 10.0))
        else:
            self.sigma = math.sqrt(spec.level * fs / 2.0)

    def block(self, n: int) -> np.ndarray:
        if self.sigma == 0.0:
            return np.zeros(n)
        g = self.sigma * gaussian_block(self._gen, n)
        if self.spec.kind is NoiseKind.WHITE_FREQUENCY:
            # sequential sum seeded with the carried phase: chunking cannot change rounding
            out = np.cumsum(np.concatenate(([self._phase], g * (TWO_PI / self.fs))))[1:]
            self._phase = float(out[-1]) if n else self._phase
            return out
        return g

    def step(self) -> float:
        return float(self.block(1)[0])


def noise_step(state: NoiseSource, spec: NoiseSpec | None = None) -> float:
    if spec is not None and spec != state.spec:
        raise ValueError("noise state belongs to a different NoiseSpec")
    return state.step()


# discrete plant description used by the time-domain engine ------------------

@dataclass(frozen=True)
class PlantModel:
    """Sample-domain description of one controlled system.

    Actuator phase accumulates ``2 pi kc v[n - actuator_delay] / fs``; the
    detector sees ``sum(w * a[n - d] for d, w in taps)`` plus link noise
    delayed by ``noise_delay``; the remote end sees ``a[n - remote_delay]``
    plus link noise.
    """

    fs: float
    kc: float
    actuator_delay: int
    taps: tuple[tuple[int, float], ...] = ((0, 1.0),)
    remote_delay: int = 0
    noise_delay: int = 0
    actuator_alpha: float = 1.0  # one-pole coefficient, 1 = no roll-off

    def __post_init__(self):
        if self.actuator_delay < 1:
            raise ValueError("the loop needs at least one sample of actuator delay")

    @property
    def history(self) -> int:
        return max([d for d, _ in self.taps] + [self.remote_delay, 1]) + 1

    def response(self, f, include_kc: bool = True):
        """Actuator volts -> detected frequency (Hz), before the demodulator low-pass."""
        f = np.asarray(f, dtype=float)
        zinv = np.exp(-1j * TWO_PI * f / self.fs)
        h = zinv ** self.actuator_delay * sum(w * zinv**d for d, w in self.taps)
        a = self.actuator_alpha
        if a != 1.0:
            h = h * a / (1 - (1 - a) * zinv)
        return h * self.kc if include_kc else h


def discretize_link(m: LinkModel, fs: float, front_end_latency: float = 0.0,
                    extra_delay: float = 0.0, kc: float | None = None) -> PlantModel:
    """Round the link delays to samples.

    The demodulator's own latency (``front_end_latency``) is taken out of the
    FPGA budget so the loop as a whole carries ``tau_fpga``.
    """
    pad = max(m.tau_fpga - front_end_latency, 0.0)
    act = int(round((pad + m.tau_aom + extra_delay) * fs))
    dl = int(round(m.tau_link * fs))
    if m.double_pass:
        taps = ((0, 0.5), (2 * dl, 0.5))
        remote, noise_delay = dl, dl
    else:
        taps = ((dl, 1.0),)
        remote, noise_delay = dl, 0
    alpha = TWO_PI * m.actuator_lpf_hz / fs if m.actuator_lpf_hz else 1.0
    return PlantModel(fs=fs, kc=m.kc if kc is None else kc, actuator_delay=max(act, 1),
                      taps=taps, remote_delay=remote, noise_delay=noise_delay,
                      actuator_alpha=min(alpha, 1.0))
