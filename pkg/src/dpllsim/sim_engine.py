"""Closed-loop simulation of one or two DPLL channels around their plants.

The sample loop itself lives in ``_kernel``; this module turns configuration
objects into the flat arrays it consumes, routes channels according to the
three multiplexer scenarios, and provides the analytic loop responses used to
predict and check what the time-domain runs measure.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import signal

from . import _kernel
from .dsp_core import (NCO_BITS, LpfSelect, lpf_group_delay_dc, lpf_response, lpf_sos,
                       tuning_word)
from .loop_filter import (Branches, CrossoverMode, GainSet, LoopFilterConfig,
                          controller_response, design_gains)
from .numerics import TWO_PI
from .plant import (DacSpec, Injection, LinkModel, NoiseSource, NoiseSpec, PlantModel,
                    VcoSpec, discretize_link)

CHANNEL_TESTPOINTS = ("adc_in", "i", "q", "phase", "phase_increment", "filter_out", "dac_out")
PLANT_TESTPOINTS = ("remote_phase", "beat_phase")
TESTPOINTS = CHANNEL_TESTPOINTS + PLANT_TESTPOINTS

CHUNK = 1 << 16


class ConfigError(ValueError):
    """Inconsistent simulation configuration."""


class Scenario(enum.Enum):
    INDEPENDENT = "independent"
    SHARED_INPUT = "shared_input"
    CASCADED = "cascaded"


@dataclass(frozen=True)
class RoutingConfig:
    scenario: Scenario = Scenario.INDEPENDENT
    vco_owner: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "scenario", Scenario(self.scenario))


@dataclass(frozen=True)
class ChannelConfig:
    """Tunable parameters of one DPLL channel.

    Loop-filter crossovers are in Hz; ``kc`` (Hz/V, or V/V for a cascaded
    channel) feeds the gain equations and defaults to the plant's kc.
    ``actuator_gain`` is what the channel's output really does to the beat
    frequency (Hz/V), also defaulting to the plant's kc.
    """

    f_ref: float = 0.0
    lpf: LpfSelect = LpfSelect.BW_31MHZ
    kp_db: float = 0.0
    f_i: float = 0.0
    f_ii: float = 0.0
    f_d: float = 0.0
    f_df: float = 0.0
    crossover_mode: CrossoverMode = CrossoverMode.RELATIVE_TO_0DB
    branches: Branches = field(default_factory=Branches)
    kc: float | None = None
    actuator_gain: float | None = None
    actuator_delay: float = 0.0   # s, on top of the plant delays
    actuator_lpf_hz: float = 0.0  # 0 keeps the plant's setting
    loop_closed: bool = True
    setpoint: float = 0.0         # Hz for a demodulator input, V for a cascaded input
    output_offset: float = 0.0    # V
    output_limit: float = 1.0     # V
    dither_amplitude: float = 0.0  # V, 0 = off
    dither_freq: float = 1e3
    quantize_output: bool = True
    lut_bits: int | None = None

    def loop_filter_config(self, kc: float, fs: float) -> LoopFilterConfig:
        return LoopFilterConfig(kp_db=self.kp_db, kc=kc, fs=fs, f_i=self.f_i, f_ii=self.f_ii,
                                f_d=self.f_d, f_df=self.f_df,
                                crossover_mode=self.crossover_mode, enabled=self.branches)


@dataclass(frozen=True)
class SimConfig:
    fs: float
    duration: int
    channels: tuple[ChannelConfig, ...]
    plant: LinkModel = field(default_factory=LinkModel)
    noise: tuple[NoiseSpec, ...] = ()
    routing: RoutingConfig = field(default_factory=RoutingConfig)
    recorded_testpoints: frozenset[str] = frozenset()
    beat_offset: float = 0.0       # Hz, beat frequency minus the channel's f_ref
    carrier_amplitude: float = 0.9  # V at the ADC
    adc_bits: int = 14
    vco: VcoSpec | None = None     # None: full scale at fs/2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "noise", tuple(self.noise))
        object.__setattr__(self, "recorded_testpoints", frozenset(self.recorded_testpoints))

    def validate(self):
        if not self.fs > 0:
            raise ConfigError("fs must be positive")
        if self.duration <= 0:
            raise ConfigError("duration must be a positive number of samples")
        if not self.channels:
            raise ConfigError("at least one channel is required")
        unknown = self.recorded_testpoints - set(TESTPOINTS)
        if unknown:
            raise ConfigError(f"unknown test points: {sorted(unknown)}")
        rc = self.routing
        if rc.scenario is not Scenario.INDEPENDENT and len(self.channels) != 2:
            raise ConfigError(f"{rc.scenario.value} routing needs exactly two channels")
        if rc.vco_owner is not None and not 0 <= rc.vco_owner < len(self.channels):
            raise ConfigError(f"vco_owner {rc.vco_owner} is not a channel")
        for n, ch in enumerate(self.channels):
            if not 0 <= ch.f_ref < self.fs / 2:
                raise ConfigError(f"channel {n}: f_ref must be in [0, fs/2)")
        for spec in self.noise:
            if spec.channel is not None and not 0 <= spec.channel < len(self.channels):
                raise ConfigError(f"noise channel {spec.channel} does not exist")
        return self

    @property
    def vco_spec(self) -> VcoSpec:
        return self.vco if self.vco is not None else VcoSpec.for_fs(self.fs)


@dataclass
class SimTrace:
    """Recorded test points: ``data[(channel, name)]`` for channel points,
    ``data[("plant<p>", name)]`` for plant points."""

    fs: float
    data: dict
    metadata: dict

    def __getitem__(self, key):
        return self.data[key]

    def channel(self, c: int, name: str) -> np.ndarray:
        return self.data[(c, name)]

    def plant(self, p: int, name: str) -> np.ndarray:
        return self.data[(f"plant{p}", name)]

    @property
    def length(self) -> int:
        return len(next(iter(self.data.values()))) if self.data else 0


# routing ---------------------------------------------------------------------

@dataclass(frozen=True)
class Wiring:
    """Result of routing: which plant each channel reads and drives."""

    n_plants: int
    src_kind: tuple[int, ...]   # 0: demodulated plant, 1: another channel's output
    src_idx: tuple[int, ...]
    act_plant: tuple[int, ...]
    fe_channel: tuple[int, ...]  # per plant: channel whose NCO/LPF settings it uses


def configure_routing(rc: RoutingConfig, channels: Sequence[ChannelConfig]) -> Wiring:
    n = len(channels)
    if rc.vco_owner is not None and not 0 <= rc.vco_owner < n:
        raise ConfigError(f"vco_owner {rc.vco_owner} is not one of {n} channels")
    if rc.scenario is Scenario.INDEPENDENT:
        return Wiring(n, (0,) * n, tuple(range(n)), tuple(range(n)), tuple(range(n)))
    if n != 2:
        raise ConfigError(f"{rc.scenario.value} routing needs exactly two channels")
    if rc.scenario is Scenario.SHARED_INPUT:
        return Wiring(1, (0, 0), (0, 0), (0, 0), (0,))
    # cascaded: channel 1 regulates channel 0's output with a second actuator
    return Wiring(1, (0, 1), (0, 0), (0, 0), (0,))


# engine ----------------------------------------------------------------------

def front_end_latency(sel: LpfSelect, fs: float) -> float:
    return lpf_group_delay_dc(sel, fs)


class Engine:
    """Resumable simulation. ``advance(n)`` continues the same run."""

    def __init__(self, cfg: SimConfig):
        self.cfg = cfg.validate()
        self.wiring = configure_routing(cfg.routing, cfg.channels)
        self.sample = 0
        self._build()

    # ------------------------------------------------------------------ setup
    def _channel_kc(self, c: int) -> float:
        ch = self.cfg.channels[c]
        return ch.kc if ch.kc is not None else self.cfg.plant.kc

    def plant_model(self, c: int) -> PlantModel:
        """Discrete actuator model for channel ``c``."""
        cfg, w = self.cfg, self.wiring
        ch = cfg.channels[c]
        fe_ch = cfg.channels[w.fe_channel[w.act_plant[c]]]
        link = cfg.plant
        if ch.actuator_lpf_hz:
            link = replace(link, actuator_lpf_hz=ch.actuator_lpf_hz)
        gain = ch.actuator_gain if ch.actuator_gain is not None else cfg.plant.kc
        return discretize_link(link, cfg.fs, front_end_latency(fe_ch.lpf, cfg.fs),
                               extra_delay=ch.actuator_delay, kc=gain)

    def gains(self, c: int) -> GainSet:
        ch = self.cfg.channels[c]
        if not ch.loop_closed:
            return GainSet()
        return design_gains(ch.loop_filter_config(self._channel_kc(c), self.cfg.fs))

    def _build(self):
        cfg, w = self.cfg, self.wiring
        P, C = w.n_plants, len(cfg.channels)
        fs = cfg.fs
        self.models = [self.plant_model(c) for c in range(C)]
        plant_models = [self.models[w.fe_channel[p]] for p in range(P)]

        u64 = np.uint64
        fe_cfg = [cfg.channels[w.fe_channel[p]] for p in range(P)]
        self.pk_nco = np.array([tuning_word(ch.f_ref, fs) for ch in fe_cfg], dtype=u64)
        beat = [ch.f_ref + cfg.beat_offset for ch in fe_cfg]
        for f in beat:
            if not 0 <= f < fs:
                raise ConfigError(f"beat frequency {f} Hz outside [0, fs)")
        self.pk_beat = np.array([tuning_word(f, fs) for f in beat], dtype=u64)
        self.pacc_beat = np.zeros(P, dtype=u64)
        self.pacc_nco = np.zeros(P, dtype=u64)
        self.pamp = np.full(P, float(cfg.carrier_amplitude))
        self.adc_step = 2.0 / (1 << cfg.adc_bits)
        self.adc_hi = float((1 << (cfg.adc_bits - 1)) - 1)
        self.adc_lo = -float(1 << (cfg.adc_bits - 1))
        self.lut_shift = np.array([NCO_BITS - ch.lut_bits if ch.lut_bits else 0 for ch in fe_cfg],
                                  dtype=np.int64)
        sos = [lpf_sos(ch.lpf, fs) for ch in fe_cfg]
        n_sec = max(s.shape[0] for s in sos)
        self.sos = np.zeros((P, n_sec, 6))
        self.sos[:, :, 0] = 1.0
        self.sos[:, :, 3] = 1.0
        for p, s in enumerate(sos):
            self.sos[p, : s.shape[0]] = s
        self.zi = np.zeros((P, 2, n_sec, 2))
        self.prev_phase = np.zeros(P)
        self.loss_count = np.zeros(P, dtype=np.int64)

        n_tap = max(len(m.taps) for m in plant_models)
        self.tap_d = np.zeros((P, n_tap), dtype=np.int64)
        self.tap_w = np.zeros((P, n_tap))
        for p, m in enumerate(plant_models):
            for t, (d, wt) in enumerate(m.taps):
                self.tap_d[p, t] = d
                self.tap_w[p, t] = wt
        self.remote_delay = np.array([m.remote_delay for m in plant_models], dtype=np.int64)
        self.noise_delay = np.array([m.noise_delay for m in plant_models], dtype=np.int64)
        ra = max(m.history for m in plant_models) + 1
        self.a_ring = np.zeros((P, ra))
        self.l_ring = np.zeros((P, ra))
        self.a_phase = np.zeros(P)

        self.src_kind = np.array(w.src_kind, dtype=np.int64)
        self.src_idx = np.array(w.src_idx, dtype=np.int64)
        self.setpoint = np.array([ch.setpoint for ch in cfg.channels], dtype=float)
        self.fe_plant = np.array([w.act_plant[c] if w.src_kind[c] else w.src_idx[c]
                                  for c in range(C)], dtype=np.int64)
        self.act_plant = np.array(w.act_plant, dtype=np.int64)
        self.act_gain = np.array([m.kc for m in self.models], dtype=float)
        self.act_delay = np.array([m.actuator_delay for m in self.models], dtype=np.int64)
        self.act_alpha = np.array([m.actuator_alpha for m in self.models], dtype=float)
        self.act_y = np.zeros(C)
        self.v_ring = np.zeros((C, int(self.act_delay.max()) + 1))
        self.gain_table = np.zeros((C, 5))
        for c in range(C):
            g = self.gains(c)
            self.gain_table[c] = (g.Kp, g.Ki, g.Kii, g.Kd, g.d_filter_coeff)
        self.fstate = np.zeros((C, 4))
        self.branch_limit = np.array([ch.output_limit for ch in cfg.channels], dtype=float)
        self.out_offset = np.array([ch.output_offset for ch in cfg.channels], dtype=float)
        self.out_limit = np.array([ch.output_limit for ch in cfg.channels], dtype=float)
        self.dither_amp = np.array([ch.dither_amplitude for ch in cfg.channels], dtype=float)
        self.dither_k = np.array([tuning_word(ch.dither_freq, fs) if ch.dither_amplitude else 0
                                  for ch in cfg.channels], dtype=u64)
        self.dither_acc = np.zeros(C, dtype=u64)
        vco = cfg.vco_spec
        self.q_mode = np.zeros(C, dtype=np.int64)
        for c, ch in enumerate(cfg.channels):
            if ch.quantize_output:
                self.q_mode[c] = 2 if cfg.routing.vco_owner == c else 1
        self.q_step = np.full(C, DacSpec().fmt.scale)
        self.vco_center = np.full(C, vco.quiescent_offset / vco.full_scale * vco.max_code)
        self.vco_max = np.full(C, float(vco.max_code))
        self.sat_count = np.zeros(C, dtype=np.int64)

        self.sources = []
        for spec in cfg.noise:
            plants = range(P) if spec.channel is None else [w.act_plant[spec.channel]]
            for p in plants:
                src = NoiseSource(spec, fs, cfg.carrier_amplitude, base_seed=cfg.seed)
                self.sources.append((p, spec.injection, src))

        rec = sorted(cfg.recorded_testpoints)
        self.ch_slot = np.full(7, -1, dtype=np.int64)
        self.pl_slot = np.full(2, -1, dtype=np.int64)
        self.ch_names = [t for t in CHANNEL_TESTPOINTS if t in rec]
        self.pl_names = [t for t in PLANT_TESTPOINTS if t in rec]
        for k, name in enumerate(self.ch_names):
            self.ch_slot[CHANNEL_TESTPOINTS.index(name)] = k
        for k, name in enumerate(self.pl_names):
            self.pl_slot[PLANT_TESTPOINTS.index(name)] = k

    # --------------------------------------------------------------- control
    def set_gains(self, c: int, gains: GainSet):
        """Replace a channel's runtime gains; takes effect at the next sample."""
        self.gain_table[c] = (gains.Kp, gains.Ki, gains.Kii, gains.Kd, gains.d_filter_coeff)

    def set_dither(self, c: int, amplitude: float, freq: float | None = None):
        self.dither_amp[c] = amplitude
        if freq is not None:
            self.dither_k[c] = np.uint64(tuning_word(freq, self.cfg.fs))

    RETUNABLE = ("kp_db", "f_i", "f_ii", "f_d", "f_df", "crossover_mode", "branches",
                 "loop_closed", "setpoint", "dither_amplitude", "dither_freq")

    def retune(self, c: int, **changes) -> ChannelConfig:
        """Change loop-filter, setpoint or dither settings of channel ``c`` between
        samples. Either every change applies or (on a validation error) none does."""
        bad = set(changes) - set(self.RETUNABLE)
        if bad:
            raise ConfigError(f"cannot change {sorted(bad)} on a running engine")
        channels = list(self.cfg.channels)
        new = replace(channels[c], **changes)
        gains = GainSet() if not new.loop_closed else design_gains(
            new.loop_filter_config(self._channel_kc(c), self.cfg.fs))
        if (new.dither_amplitude or "dither_freq" in changes) and not 0 < new.dither_freq < self.cfg.fs / 2:
            raise ConfigError("dither frequency must lie in (0, fs/2)")
        channels[c] = new
        self.cfg = replace(self.cfg, channels=tuple(channels))
        self.set_gains(c, gains)
        self.setpoint[c] = new.setpoint
        self.set_dither(c, new.dither_amplitude, new.dither_freq if new.dither_amplitude else None)
        return new

    @property
    def saturated(self) -> bool:
        return bool(self.sat_count.any())

    # ------------------------------------------------------------------- run
    def advance(self, n: int, stimulus: np.ndarray | None = None) -> dict:
        """Run ``n`` samples. ``stimulus`` (shape (channels, n)) is added at each
        channel's output summing node. Returns the recorded test points."""
        P, C = self.wiring.n_plants, len(self.cfg.channels)
        noise = {inj: np.zeros((P, n)) for inj in Injection}
        for p, inj, src in self.sources:
            noise[inj][p] += src.block(n)
        stim = np.zeros((C, n)) if stimulus is None else np.ascontiguousarray(stimulus, float).reshape(C, n)
        rec_ch = np.zeros((C, len(self.ch_names), n))
        rec_pl = np.zeros((P, len(self.pl_names), n))
        _kernel.advance(
            n, self.sample, float(self.cfg.fs),
            self.pk_beat, self.pacc_beat, self.pk_nco, self.pacc_nco, self.pamp,
            self.adc_step, self.adc_lo, self.adc_hi, self.lut_shift, self.sos, self.zi,
            self.prev_phase, self.loss_count,
            self.tap_d, self.tap_w, self.remote_delay, self.noise_delay, self.a_ring,
            self.l_ring, self.a_phase,
            noise[Injection.LINK], noise[Injection.DETECTION], noise[Injection.ACTUATOR],
            noise[Injection.ADC],
            self.src_kind, self.src_idx, self.setpoint, self.fe_plant, self.act_plant,
            self.act_gain, self.act_delay, self.act_alpha, self.act_y, self.v_ring,
            self.gain_table, self.fstate, self.branch_limit, self.out_offset, self.out_limit,
            self.dither_amp, self.dither_k, self.dither_acc, self.q_mode, self.q_step,
            self.vco_center, self.vco_max, self.sat_count, stim,
            self.ch_slot, rec_ch, self.pl_slot, rec_pl)
        self.sample += n
        out = {}
        for c in range(C):
            for k, name in enumerate(self.ch_names):
                out[(c, name)] = rec_ch[c, k]
        for p in range(P):
            for k, name in enumerate(self.pl_names):
                out[(f"plant{p}", name)] = rec_pl[p, k]
        return out

    def metadata(self) -> dict:
        from . import __version__
        return {"fs": self.cfg.fs, "samples": self.sample, "seed": self.cfg.seed,
                "noise_seeds": [s.seed for s in self.cfg.noise], "version": __version__,
                "signal_loss": self.loss_count.tolist(), "saturation": self.sat_count.tolist()}

    # ---------------------------------------------------------- analytic model
    def plant_response(self, f, c: int = 0):
        """Channel output (V) -> detected frequency (Hz), demodulator low-pass included."""
        fe_ch = self.cfg.channels[self.wiring.fe_channel[self.wiring.act_plant[c]]]
        return self.models[c].response(f) * lpf_response(fe_ch.lpf, self.cfg.fs, f)

    def loop_polynomials(self, c: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Open-loop gain of channel ``c`` as (numerator, denominator) in powers of z^-1."""
        P = np.polynomial.polynomial
        kp, ki, kii, kd, a = self.gain_table[c]
        one_minus = np.array([1.0, -1.0])
        # controller over the lowest common integrator order
        order = 2 if kii else (1 if ki else 0)
        den_c = P.polypow(one_minus, order)
        num_c = P.polymul([kp], den_c)
        if ki:
            num_c = P.polyadd(num_c, P.polymul([ki], P.polypow(one_minus, order - 1)))
        if kii:
            num_c = P.polyadd(num_c, [kii])
        if kd:
            d_den = np.array([1.0, -(1.0 - a)])
            num_c = P.polyadd(P.polymul(num_c, d_den),
                              P.polymul([kd * a], P.polymul(one_minus, den_c)))
            den_c = P.polymul(den_c, d_den)
        m = self.models[c]
        plant = np.zeros(m.actuator_delay + max(d for d, _ in m.taps) + 1)
        for d, w in m.taps:
            plant[m.actuator_delay + d] += w * m.kc
        plant_den = np.array([1.0])
        if m.actuator_alpha != 1.0:
            plant = plant * m.actuator_alpha
            plant_den = np.array([1.0, -(1.0 - m.actuator_alpha)])
        fe_ch = self.cfg.channels[self.wiring.fe_channel[self.wiring.act_plant[c]]]
        b, a_lpf = signal.sos2tf(lpf_sos(fe_ch.lpf, self.cfg.fs))
        num = P.polymul(P.polymul(num_c, plant), b)
        den = P.polymul(P.polymul(den_c, plant_den), a_lpf)
        return num, den

    def closed_loop_poles(self, c: int = 0) -> np.ndarray:
        num, den = self.loop_polynomials(c)
        n = max(len(num), len(den))
        char = np.pad(den, (0, n - len(den))) + np.pad(num, (0, n - len(num)))
        return np.roots(char)

    def is_stable(self, c: int = 0) -> bool:
        return bool(np.abs(self.closed_loop_poles(c)).max() < 1.0)

    def loop_response(self, f, c: int = 0):
        """Open-loop gain of a single demodulator-fed channel."""
        g = GainSet(*self.gain_table[c, :4], d_filter_coeff=self.gain_table[c, 4])
        return controller_response(g, f, self.cfg.fs) * self.plant_response(f, c)


def run(cfg: SimConfig, chunk: int = CHUNK) -> SimTrace:
    """Simulate ``cfg.duration`` samples and return the recorded test points."""
    eng = Engine(cfg)
    pieces: dict = {}
    left = cfg.duration
    while left > 0:
        n = min(chunk, left)
        for key, arr in eng.advance(n).items():
            pieces.setdefault(key, []).append(arr)
        left -= n
    data = {k: np.concatenate(v) for k, v in pieces.items()}
    return SimTrace(cfg.fs, data, eng.metadata())


# analytic predictions ----------------------------------------------------------

@dataclass
class ClosedLoopPrediction:
    freqs: np.ndarray
    S: np.ndarray  # sensitivity 1/(1+L)
    T: np.ndarray  # complementary L/(1+L)
    actuator: np.ndarray   # noise added at the controller output -> actuator drive
    detection: np.ndarray  # detection noise -> actuator phase (imprinted)
    link: np.ndarray       # lumped remote-end fiber noise -> remote output


def closed_loop_prediction(L, f, link: LinkModel | None = None) -> ClosedLoopPrediction:
    """Sensitivity, complementary sensitivity and the three injection-point responses.

    ``L`` is a callable (or an array already evaluated at ``f``). The link
    variant uses the lumped remote-end approximation: fiber noise sits at the
    far end, is seen by the local detector one fiber delay later, and the
    actuator reaches the remote end one fiber delay after it acts.
    """
    f = np.asarray(f, dtype=float)
    lf = np.asarray(L(f) if callable(L) else L, dtype=complex)
    if not np.all(np.isfinite(lf)):
        raise ValueError("open-loop response must be finite at the requested points")
    S = 1.0 / (1.0 + lf)
    T = lf / (1.0 + lf)
    if link is None or link.tau_link == 0:
        remote = S.copy()
    else:
        wt = TWO_PI * f * link.tau_link
        if link.double_pass:
            # T / G with G = e^{-jwt} cos(wt); zeros of G cancel inside T
            g = np.exp(-1j * wt) * np.cos(wt)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(np.abs(g) > 1e-12, T / g, np.nan)
            remote = 1.0 - ratio * np.exp(-2j * wt)
        else:
            remote = S.copy()
    return ClosedLoopPrediction(f, S, T, actuator=S.copy(), detection=-T, link=remote)


def max_bandwidth(tau: float) -> float:
    """1/(8 tau): unity-gain crossover of an integrator loop with pi/4 phase margin
    left after a pure delay ``tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    return 1.0 / (8.0 * tau)


def phase_margin(L, f_lo: float, f_hi: float, n: int = 4000) -> tuple[float, float]:
    """(crossover frequency, phase margin in radians) at the first unity-gain crossing.

    Phase is unwrapped upward from ``f_lo``, so ``f_lo`` should sit where the
    loop phase is between -pi and 0.
    """
    f = np.geomspace(f_lo, f_hi, n)
    lf = L(f)
    mag = np.abs(lf)
    idx = np.nonzero((mag[:-1] >= 1.0) & (mag[1:] < 1.0))[0]
    if idx.size == 0:
        raise ValueError("no unity-gain crossover in range")
    k = idx[0]
    lo, hi = f[k], f[k + 1]
    for _ in range(60):
        mid = math.sqrt(lo * hi)
        if abs(L(np.array([mid]))[0]) >= 1.0:
            lo = mid
        else:
            hi = mid
    fc = math.sqrt(lo * hi)
    ph = np.unwrap(np.angle(np.append(lf[: k + 1], L(np.array([fc])))))
    return fc, math.pi + float(ph[-1])


def pi4_tuning(tau: float, hf_gain_db: float = -6.0, ii_ratio: float = 0.05,
               **overrides) -> ChannelConfig:
    """PI(+II) settings aimed at a pi/4 phase margin around a pure delay ``tau``.

    The proportional gain sets the loop gain well above crossover to
    ``hf_gain_db`` (below 0 dB, so the loop stays below unity wherever a link
    response comes back up after its nulls). With g = 10**(hf_gain_db/20) and
    r = sqrt(1/g**2 - 1), a PI zero at f_i = r * f_c puts |L(f_c)| = 1, and
    pi - atan(r) - 2 pi f_c tau = pi/4 fixes the crossover f_c. A double
    integrator well below the crossover (``ii_ratio * f_c``) removes static
    phase error at little cost in margin.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not hf_gain_db < 0:
        raise ValueError("hf_gain_db must be negative")
    g = 10.0 ** (hf_gain_db / 20.0)
    r = math.sqrt(1.0 / g**2 - 1.0)
    fc = (0.75 * math.pi - math.atan(r)) / (TWO_PI * tau)
    params = dict(kp_db=hf_gain_db, f_i=r * fc, f_ii=ii_ratio * fc,
                  crossover_mode=CrossoverMode.RELATIVE_TO_KP,
                  branches=Branches(p=True, i=True, ii=ii_ratio > 0, d=False))
    params.update(overrides)
    return ChannelConfig(**params)
