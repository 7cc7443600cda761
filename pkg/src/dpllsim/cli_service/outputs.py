"""CSV writers and the run manifest.

CSV conventions: comma separator, LF line endings, '.' radix, floats written
with ``repr`` (shortest string that round-trips), fixed headers:

    vna      freq_hz,mag_db,phase_deg
    counter  gate_index,gate_time_s,mean_freq_hz
    psd      freq_hz,phase_psd_rad2_per_hz,freq_psd_hz2_per_hz,integrated_phase_rad
    trace    sample_index,<column>...   (columns named ch<c>.<point> / plant<p>.<point>)
    bode     freq_hz,mag_db,phase_deg

Each output directory holds one ``manifest.json`` that lists every CSV written
there together with its SHA-256, so each CSV belongs to exactly one manifest.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CSV_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

VNA_HEADER = ("freq_hz", "mag_db", "phase_deg")
BODE_HEADER = VNA_HEADER
COUNTER_HEADER = ("gate_index", "gate_time_s", "mean_freq_hz")
PSD_HEADER = ("freq_hz", "phase_psd_rad2_per_hz", "freq_psd_hz2_per_hz", "integrated_phase_rad")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(path, header, columns) -> Path:
    """Write equal-length columns; returns the path."""
    path = Path(path)
    cols = [np.asarray(c) for c in columns]
    if len(cols) != len(header):
        raise ValueError("one column per header field required")
    n = len(cols[0]) if cols else 0
    if any(len(c) != n for c in cols):
        raise ValueError("columns differ in length")
    text_cols = [[_fmt(v) for v in c.tolist()] for c in cols]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*text_cols):
            fh.write(",".join(row) + "\n")
    return path


def write_vna(path, result) -> Path:
    return write_csv(path, VNA_HEADER, [result.freqs, result.mag_db, result.phase_deg])


def write_bode(path, freqs, h) -> Path:
    h = np.asarray(h, dtype=complex)
    with np.errstate(divide="ignore"):
        mag = 20.0 * np.log10(np.abs(h))
    return write_csv(path, BODE_HEADER, [freqs, mag, np.rad2deg(np.angle(h))])


def write_counter(path, records) -> Path:
    return write_csv(path, COUNTER_HEADER, [np.array([r.gate_index for r in records], dtype=np.int64),
                                            np.array([r.gate_time for r in records], dtype=float),
                                            np.array([r.mean_freq for r in records], dtype=float)])


def write_psd(path, psd) -> Path:
    return write_csv(path, PSD_HEADER, [psd.freqs, psd.phase_psd, psd.freq_psd, psd.integrated_phase])


def trace_column_name(key) -> str:
    owner, name = key
    return f"{owner}.{name}" if isinstance(owner, str) else f"ch{owner}.{name}"


def write_trace(path, trace, columns) -> Path:
    header = ("sample_index",) + tuple(trace_column_name(k) for k in columns)
    data = [trace.data[k] for k in columns]
    n = len(data[0]) if data else trace.length
    return write_csv(path, header, [np.arange(n, dtype=np.int64)] + data)


def read_csv(path):
    """(header, rows as float arrays) for any file written above."""
    with open(path, encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    return header, arr


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_path: str
    config_text: str
    config: dict
    seeds: dict
    version: str
    outputs: dict = field(default_factory=dict)  # file name -> sha256
    wall_clock: dict = field(default_factory=dict)
    csv_schema_version: int = CSV_SCHEMA_VERSION
    warnings: list = field(default_factory=list)

    def add_output(self, path):
        path = Path(path)
        self.outputs[path.name] = sha256(path)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True, default=str)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path


class Stopwatch:
    def __init__(self):
        self.started = _dt.datetime.now(_dt.timezone.utc)
        self._t0 = time.perf_counter()

    def stamp(self) -> dict:
        return {"started_utc": self.started.isoformat(),
                "finished_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                "elapsed_s": time.perf_counter() - self._t0,
                "host": platform.node(), "python": platform.python_version()}
