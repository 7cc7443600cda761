"""INI-style run configuration.

Every quantity carries its unit in the key name (``f_i_hz``, ``tau_link_s``,
``kp_db``, ``kc_hz_per_v`` ...). Unknown sections or keys, bad values and
missing required keys raise ``ConfigError`` with ``file:line`` context.

Sections::

    [simulation]  fs_hz, duration_samples, seed, beat_offset_hz, carrier_amplitude_v,
                  adc_bits, record, chunk_samples
    [plant]       tau_link_s, tau_aom_s, tau_fpga_s, kc_hz_per_v, double_pass,
                  actuator_lpf_hz
    [routing]     scenario, vco_owner
    [vco]         full_scale_hz, quiescent_offset_hz
    [channel.N]   f_ref_hz, lpf_mhz, tuning, tuning_hf_gain_db, tuning_ii_ratio, kp_db,
                  f_i_hz, f_ii_hz, f_d_hz, f_df_hz, crossover, branches, kc_hz_per_v,
                  actuator_gain_hz_per_v, actuator_delay_s, actuator_lpf_hz, loop_closed,
                  setpoint_hz, output_offset_v, output_limit_v, dither_amplitude_v,
                  dither_freq_hz, quantize_output, lut_bits
    [noise.NAME]  kind, level_rad2_per_hz | level_hz2_per_hz | level_db, seed,
                  injection, channel
    [vna]         f_start_hz, f_stop_hz, points, amplitude_v, cycles_per_point,
                  settle_cycles, workers, channel
    [analysis]    gate_time_s, psd_segment_samples, psd_testpoint, psd_channel
    [design]      bode_f_start_hz, bode_f_stop_hz, bode_points
"""

from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..dsp_core import LpfSelect
from ..loop_filter import Branches, CrossoverMode
from ..plant import LinkModel, NoiseKind, NoiseSpec, VcoSpec
from ..sim_engine import (CHANNEL_TESTPOINTS, CHUNK, TESTPOINTS, ChannelConfig, ConfigError,
                          RoutingConfig, Scenario, SimConfig, pi4_tuning)

SEED_ENV = "DPLLSIM_SEED"

_KEYS = {
    "simulation": {"fs_hz", "duration_samples", "seed", "beat_offset_hz", "carrier_amplitude_v",
                   "adc_bits", "record", "chunk_samples"},
    "plant": {"tau_link_s", "tau_aom_s", "tau_fpga_s", "kc_hz_per_v", "double_pass",
              "actuator_lpf_hz"},
    "routing": {"scenario", "vco_owner"},
    "vco": {"full_scale_hz", "quiescent_offset_hz"},
    "channel": {"f_ref_hz", "lpf_mhz", "tuning", "tuning_hf_gain_db", "tuning_ii_ratio", "kp_db",
                "f_i_hz", "f_ii_hz", "f_d_hz", "f_df_hz", "crossover", "branches", "kc_hz_per_v",
                "actuator_gain_hz_per_v", "actuator_delay_s", "actuator_lpf_hz", "loop_closed",
                "setpoint_hz", "output_offset_v", "output_limit_v", "dither_amplitude_v",
                "dither_freq_hz", "quantize_output", "lut_bits"},
    "noise": {"kind", "level_rad2_per_hz", "level_hz2_per_hz", "level_db", "seed", "injection",
              "channel"},
    "vna": {"f_start_hz", "f_stop_hz", "points", "amplitude_v", "cycles_per_point",
            "settle_cycles", "workers", "channel"},
    "analysis": {"gate_time_s", "psd_segment_samples", "psd_testpoint", "psd_channel"},
    "design": {"bode_f_start_hz", "bode_f_stop_hz", "bode_points"},
}

_LEVEL_KEY = {NoiseKind.WHITE_PHASE: "level_rad2_per_hz",
              NoiseKind.WHITE_FREQUENCY: "level_hz2_per_hz",
              NoiseKind.ADC_SNR: "level_db"}

PHASE_LIKE = {"phase": "phase", "phase_increment": "phase_increment",
              "beat_phase": "phase", "remote_phase": "phase"}


@dataclass(frozen=True)
class VnaSettings:
    f_start: float = 100.0
    f_stop: float = 1e5
    points: int = 50
    amplitude: float = 0.01
    cycles_per_point: int = 100
    settle_cycles: int = 20
    workers: int = 1
    channel: int = 0


@dataclass(frozen=True)
class AnalysisSettings:
    gate_time: float = 1.0
    psd_segment: int = 4096
    psd_testpoint: str = "phase_increment"
    psd_channel: int = 0  # channel, or plant index for plant test points


@dataclass(frozen=True)
class DesignSettings:
    f_start: float = 10.0
    f_stop: float = 1e6
    points: int = 200


@dataclass
class RunConfig:
    sim: SimConfig
    vna: VnaSettings = field(default_factory=VnaSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    design: DesignSettings = field(default_factory=DesignSettings)
    chunk: int = CHUNK
    path: str = ""
    text: str = ""
    seed_source: str = "config"


class _Reader:
    """Typed access to one section, with line numbers for errors."""

    def __init__(self, path, name, section, lines):
        self.path, self.name, self.section, self.lines = path, name, section, lines

    def where(self, key=None) -> str:
        line = self.lines.get((self.name, key)) if key else self.lines.get((self.name, None))
        return f"{self.path}:{line}" if line else str(self.path)

    def fail(self, key, msg):
        raise ConfigError(f"{self.where(key)}: [{self.name}] {key}: {msg}")

    def has(self, key) -> bool:
        return key in self.section

    def raw(self, key, default=None, required=False):
        if key not in self.section:
            if required:
                raise ConfigError(f"{self.where()}: [{self.name}] missing required key {key!r}")
            return default
        return self.section[key].strip()

    def float(self, key, default=None, required=False):
        v = self.raw(key, None, required)
        if v is None:
            return default
        try:
            return float(v)
        except ValueError:
            self.fail(key, f"expected a number, got {v!r}")

    def int(self, key, default=None, required=False):
        v = self.raw(key, None, required)
        if v is None:
            return default
        try:
            x = float(v)
            if x != int(x):
                raise ValueError
            return int(x)
        except (ValueError, OverflowError):
            self.fail(key, f"expected an integer, got {v!r}")

    def bool(self, key, default=None):
        v = self.raw(key)
        if v is None:
            return default
        b = configparser.ConfigParser.BOOLEAN_STATES.get(v.lower())
        if b is None:
            self.fail(key, f"expected true/false, got {v!r}")
        return b

    def parse(self, key, fn, default=None):
        v = self.raw(key)
        if v is None:
            return default
        try:
            return fn(v)
        except (ValueError, KeyError) as exc:
            self.fail(key, str(exc) or f"bad value {v!r}")


def _line_numbers(text: str) -> dict:
    lines, section = {}, None
    for n, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = n
            continue
        m = re.match(r"([^\s=:#;][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), n)
    return lines


def _branches(text: str) -> Branches:
    names = {t.strip().lower() for t in re.split(r"[,\s+]+", text) if t.strip()}
    unknown = names - {"p", "i", "ii", "d"}
    if unknown:
        raise ValueError(f"unknown branches {sorted(unknown)}; use p, i, ii, d")
    return Branches(p="p" in names, i="i" in names, ii="ii" in names, d="d" in names)


def _record(text: str) -> frozenset:
    names = {t.strip() for t in text.split(",") if t.strip()}
    unknown = names - set(TESTPOINTS)
    if unknown:
        raise ValueError(f"unknown test points {sorted(unknown)}; choose from {', '.join(TESTPOINTS)}")
    return frozenset(names)


def _vco_owner(text: str):
    return None if text.lower() in ("none", "") else int(text)


def _channel(r: _Reader, fs: float, plant: LinkModel) -> ChannelConfig:
    base = ChannelConfig()
    tuning = r.raw("tuning", "manual").lower()
    if tuning == "pi4":
        base = pi4_tuning(plant.total_delay, r.float("tuning_hf_gain_db", -6.0),
                          r.float("tuning_ii_ratio", 0.05))
    elif tuning != "manual":
        r.fail("tuning", f"expected 'manual' or 'pi4', got {tuning!r}")
    kw = dict(
        f_ref=r.float("f_ref_hz", required=True),
        lpf=r.parse("lpf_mhz", LpfSelect.parse, base.lpf),
        kp_db=r.float("kp_db", base.kp_db),
        f_i=r.float("f_i_hz", base.f_i),
        f_ii=r.float("f_ii_hz", base.f_ii),
        f_d=r.float("f_d_hz", base.f_d),
        f_df=r.float("f_df_hz", base.f_df),
        crossover_mode=r.parse("crossover", CrossoverMode.parse, base.crossover_mode),
        branches=r.parse("branches", _branches, base.branches),
        kc=r.float("kc_hz_per_v", base.kc),
        actuator_gain=r.float("actuator_gain_hz_per_v", base.actuator_gain),
        actuator_delay=r.float("actuator_delay_s", base.actuator_delay),
        actuator_lpf_hz=r.float("actuator_lpf_hz", base.actuator_lpf_hz),
        loop_closed=r.bool("loop_closed", base.loop_closed),
        setpoint=r.float("setpoint_hz", base.setpoint),
        output_offset=r.float("output_offset_v", base.output_offset),
        output_limit=r.float("output_limit_v", base.output_limit),
        dither_amplitude=r.float("dither_amplitude_v", base.dither_amplitude),
        dither_freq=r.float("dither_freq_hz", base.dither_freq),
        quantize_output=r.bool("quantize_output", base.quantize_output),
        lut_bits=r.int("lut_bits", base.lut_bits),
    )
    if kw["kc"] == 0:
        r.fail("kc_hz_per_v", "must be non-zero")
    return ChannelConfig(**kw)


def _noise(r: _Reader) -> NoiseSpec:
    kind = r.parse("kind", NoiseKind, None)
    if kind is None:
        raise ConfigError(f"{r.where()}: [{r.name}] missing required key 'kind'")
    level_key = _LEVEL_KEY[kind]
    for other in set(_LEVEL_KEY.values()) - {level_key}:
        if r.has(other):
            r.fail(other, f"{kind.value} noise takes {level_key}")
    try:
        return NoiseSpec(kind, r.float(level_key, required=True), seed=r.int("seed", 0),
                         injection=r.raw("injection"), channel=r.int("channel"))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{r.where()}: [{r.name}] {exc}") from None


def parse_config(text: str, path: str = "<config>", env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = _line_numbers(text)
    readers = {}
    for name in cp.sections():
        kind = name.split(".", 1)[0]
        if kind not in _KEYS or (kind in ("channel", "noise")) != ("." in name):
            line = lines.get((name, None))
            raise ConfigError(f"{path}:{line}: unknown section [{name}]")
        r = _Reader(path, name, cp[name], lines)
        for key in cp[name]:
            if key not in _KEYS[kind]:
                r.fail(key, "unknown key")
        readers[name] = r

    def get(name):
        return readers.get(name) or _Reader(path, name, {}, lines)

    s = get("simulation")
    fs = s.float("fs_hz", required=True)
    if not fs > 0:
        s.fail("fs_hz", "must be positive")
    p = get("plant")
    try:
        plant = LinkModel(tau_link=p.float("tau_link_s", 2.0e-6), tau_aom=p.float("tau_aom_s", 1.5e-6),
                          tau_fpga=p.float("tau_fpga_s", 0.5e-6), kc=p.float("kc_hz_per_v", 1.0),
                          double_pass=p.bool("double_pass", True),
                          actuator_lpf_hz=p.float("actuator_lpf_hz", 0.0))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{p.where()}: [plant] {exc}") from None

    channel_names = sorted((n for n in readers if n.startswith("channel.")),
                           key=lambda n: (len(n), n))
    channels = []
    for k, name in enumerate(channel_names):
        if name != f"channel.{k}":
            raise ConfigError(f"{path}:{lines.get((name, None))}: channels must be numbered "
                              f"channel.0, channel.1, ... (found [{name}])")
        channels.append(_channel(readers[name], fs, plant))
    if not channels:
        raise ConfigError(f"{path}: at least one [channel.N] section is required")
    noise = [_noise(readers[n]) for n in readers if n.startswith("noise.")]

    rt = get("routing")
    routing = RoutingConfig(rt.parse("scenario", Scenario, Scenario.INDEPENDENT),
                            rt.parse("vco_owner", _vco_owner, None))
    v = get("vco")
    vco = None
    if "vco" in readers:
        vco = VcoSpec(enabled=True, full_scale=v.float("full_scale_hz", fs / 2),
                      quiescent_offset=v.float("quiescent_offset_hz", 0.0))

    seed = s.int("seed", 0)
    seed_source = "config"
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
        seed_source = SEED_ENV

    a = get("analysis")
    analysis = AnalysisSettings(gate_time=a.float("gate_time_s", 1.0),
                                psd_segment=a.int("psd_segment_samples", 4096),
                                psd_testpoint=a.raw("psd_testpoint", "phase_increment"),
                                psd_channel=a.int("psd_channel", 0))
    if analysis.psd_testpoint not in PHASE_LIKE:
        a.fail("psd_testpoint", f"choose one of {', '.join(PHASE_LIKE)}")
    record = s.parse("record", _record, frozenset())

    try:
        sim = SimConfig(fs=fs, duration=s.int("duration_samples", required=True), channels=channels,
                        plant=plant, noise=noise, routing=routing,
                        recorded_testpoints=record | {analysis.psd_testpoint, "phase_increment"},
                        beat_offset=s.float("beat_offset_hz", 0.0),
                        carrier_amplitude=s.float("carrier_amplitude_v", 0.9),
                        adc_bits=s.int("adc_bits", 14), vco=vco, seed=seed).validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    vn = get("vna")
    vna = VnaSettings(f_start=vn.float("f_start_hz", 100.0), f_stop=vn.float("f_stop_hz", 1e5),
                      points=vn.int("points", 50), amplitude=vn.float("amplitude_v", 0.01),
                      cycles_per_point=vn.int("cycles_per_point", 100),
                      settle_cycles=vn.int("settle_cycles", 20), workers=vn.int("workers", 1),
                      channel=vn.int("channel", 0))
    if not 0 < vna.f_start < vna.f_stop < fs / 2:
        vn.fail("f_stop_hz", "need 0 < f_start_hz < f_stop_hz < fs/2")
    if not 0 <= vna.channel < len(channels):
        vn.fail("channel", "no such channel")
    d = get("design")
    design = DesignSettings(d.float("bode_f_start_hz", 10.0), d.float("bode_f_stop_hz", min(1e6, fs / 4)),
                            d.int("bode_points", 200))
    if not 0 < design.f_start < design.f_stop < fs / 2:
        d.fail("bode_f_stop_hz", "need 0 < bode_f_start_hz < bode_f_stop_hz < fs/2")
    chunk = s.int("chunk_samples", CHUNK)
    if chunk < 1:
        s.fail("chunk_samples", "must be >= 1")
    return RunConfig(sim, vna, analysis, design, chunk, str(path), text, seed_source)


def load_config(path, env: dict | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), env)


def recorded_columns(cfg: SimConfig, n_plants: int) -> list[tuple]:
    """Trace column keys in a fixed order: channels first, then plants."""
    cols = [(c, name) for c in range(len(cfg.channels)) for name in CHANNEL_TESTPOINTS
            if name in cfg.recorded_testpoints]
    cols += [(f"plant{p}", name) for p in range(n_plants) for name in TESTPOINTS[len(CHANNEL_TESTPOINTS):]
             if name in cfg.recorded_testpoints]
    return cols
