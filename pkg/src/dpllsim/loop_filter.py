"""PII2D loop filter: gain design from crossover frequencies, per-sample recurrence,
and the exact discrete-time frequency response of that recurrence.

The filter input is the frequency error in Hz and the output is in volts, so the
open-loop DC gain ``kc`` of the controlled system is in Hz/V.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import TWO_PI


class CrossoverMode(enum.Enum):
    RELATIVE_TO_0DB = "relative_to_0dB"
    RELATIVE_TO_KP = "relative_to_Kp"

    @classmethod
    def parse(cls, value) -> "CrossoverMode":
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text in ("relative_to_0db", "0db", "0"):
            return cls.RELATIVE_TO_0DB
        if text in ("relative_to_kp", "kp"):
            return cls.RELATIVE_TO_KP
        raise ValueError(f"unknown crossover mode {value!r}")


@dataclass(frozen=True)
class Branches:
    p: bool = True
    i: bool = True
    ii: bool = False
    d: bool = False


@dataclass(frozen=True)
class LoopFilterConfig:
    kp_db: float = 0.0
    kc: float = 1.0
    fs: float = 125e6
    f_i: float = 0.0
    f_ii: float = 0.0
    f_d: float = 0.0
    f_df: float = 0.0  # 0 disables the derivative roll-off
    crossover_mode: CrossoverMode = CrossoverMode.RELATIVE_TO_0DB
    enabled: Branches = field(default_factory=Branches)

    def validate(self):
        if not self.fs > 0:
            raise ValueError("fs must be positive")
        if self.kc == 0 or not math.isfinite(self.kc):
            raise ValueError("kc must be finite and non-zero")
        if not math.isfinite(self.kp_db):
            raise ValueError("kp_db must be finite")
        nyq = self.fs / 2
        checks = [("f_i", self.f_i, self.enabled.i),
                  ("f_ii", self.f_ii, self.enabled.ii and self.enabled.i),
                  ("f_d", self.f_d, self.enabled.d)]
        for name, value, on in checks:
            if on and not 0 < value < nyq:
                raise ValueError(f"{name}={value} Hz must lie in (0, fs/2)")
        if self.enabled.d and self.f_df and not 0 < self.f_df < nyq:
            raise ValueError(f"f_df={self.f_df} Hz must lie in (0, fs/2)")
        return self


@dataclass(frozen=True)
class GainSet:
    Kp: float = 0.0
    Ki: float = 0.0
    Kii: float = 0.0
    Kd: float = 0.0
    d_filter_coeff: float = 1.0  # 1 means no roll-off

    def scaled(self, factor: float) -> "GainSet":
        return replace(self, Kp=self.Kp * factor, Ki=self.Ki * factor,
                       Kii=self.Kii * factor, Kd=self.Kd * factor)


def design_gains(cfg: LoopFilterConfig) -> GainSet:
    """Translate user settings into runtime gains.

    Kp  = 10**(kp_db/20) / kc
    Ki  = f_i * 2pi/fs * (1/kc  or  Kp)
    Kii = Ki * f_ii * 2pi/fs
    Kd  = fs/(2pi f_d) * (1/kc  or  Kp)
    D filter coefficient = f_df * 2pi/fs
    """
    cfg.validate()
    w = TWO_PI / cfg.fs
    kp_lin = 10.0 ** (cfg.kp_db / 20.0) / cfg.kc
    base = kp_lin if cfg.crossover_mode is CrossoverMode.RELATIVE_TO_KP else 1.0 / cfg.kc
    on = cfg.enabled
    ki = base * cfg.f_i * w if on.i else 0.0
    kii = ki * cfg.f_ii * w if (on.i and on.ii) else 0.0
    kd = base / cfg.f_d / w if on.d else 0.0
    d_coeff = cfg.f_df * w if (on.d and cfg.f_df) else 1.0
    return GainSet(Kp=kp_lin if on.p else 0.0, Ki=ki, Kii=kii, Kd=kd, d_filter_coeff=d_coeff)


@dataclass
class LoopFilterState:
    integrator_acc: float = 0.0         # running sum of e
    double_integrator_acc: float = 0.0  # running sum of integrator_acc
    previous_input: float = 0.0
    d_filter_state: float = 0.0
    limit: float = math.inf             # saturation bound on each branch output


def _clamp(x: float, lim: float) -> float:
    return lim if x > lim else (-lim if x < -lim else x)


def filter_step(state: LoopFilterState, gains: GainSet, e: float) -> tuple[LoopFilterState, float]:
    """Advance the PII2D recurrence by one sample.

    I branch  = Ki * sum(e)
    II branch = Kii * sum(sum(e))
    D branch  = one-pole low-pass of Kd * (e - e_prev)
    Accumulators stop (anti-windup) once their branch output hits ``state.limit``.
    """
    lim = state.limit
    acc1 = state.integrator_acc + e
    if gains.Ki and abs(gains.Ki * acc1) > lim:
        acc1 = state.integrator_acc
    acc2 = state.double_integrator_acc + acc1
    if gains.Kii and abs(gains.Kii * acc2) > lim:
        acc2 = state.double_integrator_acc
    diff = gains.Kd * (e - state.previous_input)
    d_out = state.d_filter_state + gains.d_filter_coeff * (diff - state.d_filter_state)
    u = (gains.Kp * e + _clamp(gains.Ki * acc1, lim) + _clamp(gains.Kii * acc2, lim) + d_out)
    new = LoopFilterState(acc1, acc2, e, d_out, lim)
    return new, _clamp(u, lim)


def run_filter(gains: GainSet, e, state: LoopFilterState | None = None):
    """Apply ``filter_step`` to a whole sequence; returns (final_state, outputs)."""
    state = state or LoopFilterState()
    out = np.empty(len(e))
    for n, x in enumerate(e):
        state, out[n] = filter_step(state, gains, float(x))
    return state, out


def controller_response(gains: GainSet, f, fs: float):
    """Exact frequency response of ``filter_step`` (below saturation) at z = exp(j 2 pi f / fs)."""
    f_arr = np.asarray(f, dtype=float)
    if np.any(f_arr <= 0) or np.any(f_arr >= fs / 2):
        raise ValueError("frequencies must lie in (0, fs/2)")
    zinv = np.exp(-1j * TWO_PI * f_arr / fs)
    integ = 1.0 / (1.0 - zinv)
    a = gains.d_filter_coeff
    d_lp = a / (1.0 - (1.0 - a) * zinv)
    h = gains.Kp + gains.Ki * integ + gains.Kii * integ**2 + gains.Kd * (1.0 - zinv) * d_lp
    return complex(h) if h.ndim == 0 else h
