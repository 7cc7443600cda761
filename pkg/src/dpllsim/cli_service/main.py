"""``dpllsim`` command line: design, vna, simulate, serve.

Exit codes: 0 success, 1 configuration error, 2 instrument warning
(saturated VNA point, DAC/VCO saturation or signal loss during a run).
"""

from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .. import __version__
from ..instruments import (FrequencyCounter, SimSystem, log_freqs, psd_estimate, vna_sweep)
from ..loop_filter import controller_response
from ..sim_engine import ConfigError, Engine, closed_loop_prediction, max_bandwidth, run
from . import outputs
from .config import PHASE_LIKE, RunConfig, load_config, recorded_columns
from .monitor import serve_monitor

EXIT_OK, EXIT_CONFIG, EXIT_WARNING = 0, 1, 2

log = logging.getLogger("dpllsim")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_jsonable(v) for v in obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _manifest(command: str, rc: RunConfig, watch) -> outputs.RunManifest:
    cfg = rc.sim
    return outputs.RunManifest(
        command=command, config_path=rc.path, config_text=rc.text,
        config={"sim": _jsonable(cfg), "vna": _jsonable(rc.vna),
                "analysis": _jsonable(rc.analysis), "design": _jsonable(rc.design)},
        seeds={"base": cfg.seed, "source": rc.seed_source,
               "noise": [n.seed for n in cfg.noise]},
        version=__version__, wall_clock=watch.stamp())


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands ------------------------------------------------------------------------

def cmd_design(rc: RunConfig, out: Path) -> int:
    watch = outputs.Stopwatch()
    cfg = rc.sim
    eng = Engine(cfg)
    tau = cfg.plant.total_delay
    freqs = log_freqs(rc.design.f_start, rc.design.f_stop, rc.design.points)
    man = _manifest("design", rc, watch)
    print(f"loop delay tau = {tau:.6g} s -> max bandwidth 1/(8 tau) = {max_bandwidth(tau):.6g} Hz")
    for c in range(len(cfg.channels)):
        g = eng.gains(c)
        print(f"channel {c}: Kp={g.Kp!r} Ki={g.Ki!r} Kii={g.Kii!r} Kd={g.Kd!r} "
              f"d_filter={g.d_filter_coeff!r}")
        path = outputs.write_bode(out / f"bode_ch{c}.csv", freqs,
                                  controller_response(g, freqs, cfg.fs))
        man.add_output(path)
        if eng.wiring.src_kind[c] == 0 and cfg.channels[c].loop_closed:
            print(f"channel {c}: closed loop {'stable' if eng.is_stable(c) else 'UNSTABLE'}")
    man.wall_clock = watch.stamp()
    man.write(out)
    return EXIT_OK


def cmd_vna(rc: RunConfig, out: Path, closed: bool, points: int | None,
            workers: int | None) -> int:
    watch = outputs.Stopwatch()
    v = rc.vna
    freqs = log_freqs(v.f_start, v.f_stop, points or v.points)
    system = SimSystem(rc.sim, "closed" if closed else "open", v.channel, rc.chunk)
    res = vna_sweep(system, freqs, v.amplitude, v.cycles_per_point, v.settle_cycles,
                    workers or v.workers)
    man = _manifest("vna", rc, watch)
    man.add_output(outputs.write_vna(out / "vna.csv", res))
    if closed:
        eng = Engine(rc.sim)
        pred = closed_loop_prediction(lambda f: eng.loop_response(f, v.channel), freqs)
        err = res.mag_db - 20 * np.log10(np.abs(pred.S))
        print(f"closed-loop VNA vs predicted S: max |error| {np.max(np.abs(err)):.3g} dB")
    code = EXIT_OK
    if res.any_saturated:
        bad = res.freqs[res.saturated]
        man.warnings.append(f"saturated at {len(bad)} points: {bad.tolist()}")
        log.warning("output saturated at %d sweep points", len(bad))
        code = EXIT_WARNING
    man.wall_clock = watch.stamp()
    man.write(out)
    print(f"wrote {out / 'vna.csv'} ({len(freqs)} points)")
    return code


def cmd_simulate(rc: RunConfig, out: Path, duration: int | None, record) -> int:
    watch = outputs.Stopwatch()
    cfg = rc.sim
    if duration is not None:
        cfg = dataclasses.replace(cfg, duration=duration)
    if record:
        cfg = dataclasses.replace(cfg, recorded_testpoints=cfg.recorded_testpoints | set(record))
    cfg = cfg.validate()
    trace = run(cfg, rc.chunk)
    n_plants = Engine(dataclasses.replace(cfg, duration=1)).wiring.n_plants
    man = _manifest("simulate", rc, watch)
    man.config["sim"] = _jsonable(cfg)
    man.add_output(outputs.write_trace(out / "trace.csv", trace, recorded_columns(cfg, n_plants)))

    a = rc.analysis
    for c in range(len(cfg.channels)):
        counter = FrequencyCounter(cfg.fs, a.gate_time)
        recs = counter.update(trace.channel(c, "phase_increment"))
        man.add_output(outputs.write_counter(out / f"counter_ch{c}.csv", recs))
    tp = a.psd_testpoint
    key = (f"plant{a.psd_channel}", tp) if tp in ("beat_phase", "remote_phase") else (a.psd_channel, tp)
    if key not in trace.data:
        raise ConfigError(f"PSD source {key} was not simulated")
    x = trace.data[key]
    if x.size >= 2 * a.psd_segment:
        psd = psd_estimate(x, cfg.fs, a.psd_segment, PHASE_LIKE[tp])
        man.add_output(outputs.write_psd(out / "psd.csv", psd))
        print(f"integrated phase noise ({tp}): {psd.integrated_phase[0]:.6g} rad")
    else:
        man.warnings.append("run too short for the configured PSD segment; psd.csv not written")
    meta = trace.metadata
    code = EXIT_OK
    if any(meta["saturation"]):
        man.warnings.append(f"output saturation counts {meta['saturation']}")
        code = EXIT_WARNING
    if any(meta["signal_loss"]):
        man.warnings.append(f"signal-loss samples {meta['signal_loss']}")
        code = EXIT_WARNING
    for w in man.warnings:
        log.warning(w)
    man.wall_clock = watch.stamp()
    man.write(out)
    print(f"wrote {len(man.outputs)} CSV files and manifest to {out}")
    return code


def cmd_serve(rc: RunConfig, host: str, port: int, forever: bool, pace: float) -> int:
    server = serve_monitor(rc.sim, port=port, host=host, chunk=rc.chunk,
                           gate_time=rc.analysis.gate_time,
                           max_samples=None if forever else rc.sim.duration, pace=pace)
    print(json.dumps({"listening": {"host": server.address[0], "port": server.port}}), flush=True)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpllsim", description="Digital PLL simulator")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("design", help="report gains, controller Bode CSV and max bandwidth")
    d.add_argument("config")
    d.add_argument("-o", "--out", default="out")

    v = sub.add_parser("vna", help="swept-sine transfer function of the simulated loop")
    v.add_argument("config")
    mode = v.add_mutually_exclusive_group()
    mode.add_argument("--closed", action="store_true", help="closed loop (measures S)")
    mode.add_argument("--open", action="store_true", help="open loop (default)")
    v.add_argument("--points", type=int)
    v.add_argument("--workers", type=int)
    v.add_argument("-o", "--out", default="out")

    s = sub.add_parser("simulate", help="time-domain run with trace, counter and PSD output")
    s.add_argument("config")
    s.add_argument("--duration", type=int, help="samples (overrides the config)")
    s.add_argument("--record", default="", help="comma-separated extra test points")
    s.add_argument("-o", "--out", default="out")

    m = sub.add_parser("serve", help="run the simulation behind the TCP monitor")
    m.add_argument("config")
    m.add_argument("--host", default="127.0.0.1")
    m.add_argument("--port", type=int, default=0)
    m.add_argument("--forever", action="store_true", help="ignore duration_samples")
    m.add_argument("--pace", type=float, default=0.0, help="seconds to sleep per chunk")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        rc = load_config(args.config)
        if args.command == "design":
            return cmd_design(rc, _outdir(args.out))
        if args.command == "vna":
            return cmd_vna(rc, _outdir(args.out), args.closed, args.points, args.workers)
        if args.command == "simulate":
            record = [t.strip() for t in args.record.split(",") if t.strip()]
            return cmd_simulate(rc, _outdir(args.out), args.duration, record)
        return cmd_serve(rc, args.host, args.port, args.forever, args.pace)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
