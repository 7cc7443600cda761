"""Line-oriented TCP monitor for a running simulation.

Wire format: one JSON object per line (UTF-8, LF-terminated)::

    {"kind": <kind>, "id": <any, echoed back>, "payload": {...}}

Requests and their single reply (``ack`` on success, ``error`` otherwise):

    get_param            {"channel": c, "name": n}          -> ack {"channel", "name", "value"}
    set_param            {"channel": c, "name": n, "value"}  -> ack {"channel", "name", "value"}
    subscribe_testpoint  {"channel": c, "name": point, "decimation": k}
    counter_log          {"channel": c, "from_gate": g, "follow": bool}
                         -> ack {"records": [...]} with every gate >= g so far

Streamed messages (no reply expected) reuse the request kind:
``subscribe_testpoint`` carries each chunk of a (decimated) test point and
``counter_log`` one gate record each.

Parameter changes go through a single queue that the simulation thread drains
between chunks, so they always take effect between two samples; their ``ack``
is sent only once applied. Clients may disconnect and reconnect at any time;
the simulation never waits for them, and the counter log is kept server-side
so a client can backfill from the last gate it saw. There is no
authentication; the default bind address is loopback only.
"""

from __future__ import annotations

import json
import queue
import socket
import socketserver
import threading
from dataclasses import asdict, replace

import numpy as np

from ..instruments import FrequencyCounter
from ..loop_filter import Branches, CrossoverMode
from ..sim_engine import CHANNEL_TESTPOINTS, ConfigError, Engine, SimConfig
from .outputs import trace_column_name

KINDS = ("get_param", "set_param", "subscribe_testpoint", "counter_log", "ack", "error")

# wire name -> (ChannelConfig field, decoder, encoder)
PARAMS = {
    "kp_db": ("kp_db", float, float),
    "f_i_hz": ("f_i", float, float),
    "f_ii_hz": ("f_ii", float, float),
    "f_d_hz": ("f_d", float, float),
    "f_df_hz": ("f_df", float, float),
    "crossover": ("crossover_mode", CrossoverMode.parse, lambda m: m.value),
    "branches": ("branches", lambda v: Branches(**v), asdict),
    "loop_closed": ("loop_closed", bool, bool),
    "setpoint_hz": ("setpoint", float, float),
    "dither_amplitude_v": ("dither_amplitude", float, float),
    "dither_freq_hz": ("dither_freq", float, float),
}


def encode(kind: str, payload: dict, msg_id=None) -> bytes:
    msg = {"kind": kind, "payload": payload}
    if msg_id is not None:
        msg["id"] = msg_id
    return (json.dumps(msg, sort_keys=True, allow_nan=False) + "\n").encode("utf-8")


def _record_payload(channel: int, r) -> dict:
    return {"channel": channel, "gate_index": r.gate_index, "gate_time_s": r.gate_time,
            "mean_freq_hz": r.mean_freq}


class _Client:
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.lock = threading.Lock()
        self.alive = True
        self.follow: set[int] = set()
        self.testpoints: dict = {}  # (channel, name) -> decimation

    def send(self, data: bytes):
        if not self.alive:
            return
        try:
            with self.lock:
                self.sock.sendall(data)
        except OSError:
            self.alive = False


class MonitorServer:
    """Runs ``cfg`` chunk by chunk in a background thread and serves clients.

    ``max_samples`` (default: ``cfg.duration``; ``None`` runs until ``stop``)
    bounds the run. ``pace`` seconds of sleep per chunk slow the simulation
    down for interactive use.
    """

    def __init__(self, cfg: SimConfig, host: str = "127.0.0.1", port: int = 0,
                 chunk: int = 4096, gate_time: float = 1.0, max_samples: int | None = -1,
                 pace: float = 0.0):
        cfg = cfg.validate()
        self.cfg = replace(cfg, recorded_testpoints=frozenset(CHANNEL_TESTPOINTS))
        self.engine = Engine(self.cfg)
        self.chunk = chunk
        self.pace = pace
        self.max_samples = cfg.duration if max_samples == -1 else max_samples
        self.counters = [FrequencyCounter(cfg.fs, gate_time) for _ in cfg.channels]
        self.records: list[list] = [[] for _ in cfg.channels]
        self.commands: queue.Queue = queue.Queue()
        self.clients: list[_Client] = []
        self.clients_lock = threading.Lock()
        self.log_lock = threading.Lock()
        self._stop = threading.Event()
        self.finished = threading.Event()
        self.samples_done = 0

        monitor = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                client = _Client(self.connection)
                with monitor.clients_lock:
                    monitor.clients.append(client)
                try:
                    for raw in self.rfile:
                        if monitor._stop.is_set():
                            break
                        monitor._on_line(client, raw)
                finally:
                    client.alive = False
                    with monitor.clients_lock:
                        if client in monitor.clients:
                            monitor.clients.remove(client)

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._tcp = Server((host, port), Handler)
        self.address = self._tcp.server_address
        self._threads = [threading.Thread(target=self._tcp.serve_forever, daemon=True),
                         threading.Thread(target=self._run, daemon=True)]

    @property
    def port(self) -> int:
        return self.address[1]

    def start(self) -> "MonitorServer":
        for t in self._threads:
            t.start()
        return self

    def stop(self):
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()
        with self.clients_lock:
            for c in self.clients:
                try:
                    c.sock.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
        self._threads[1].join(timeout=10)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    # ----------------------------------------------------------------- requests
    def _on_line(self, client: _Client, raw: bytes):
        msg_id = None
        try:
            msg = json.loads(raw.decode("utf-8"))
            if not isinstance(msg, dict):
                raise ValueError("message must be a JSON object")
            msg_id = msg.get("id")
            kind = msg.get("kind")
            payload = msg.get("payload", {})
            if not isinstance(payload, dict):
                raise ValueError("payload must be an object")
            if kind in ("get_param", "set_param"):
                self._channel(payload)
                name = payload.get("name")
                if name not in PARAMS:
                    raise ValueError(f"unknown parameter {name!r}; known: {', '.join(PARAMS)}")
                if kind == "set_param" and "value" not in payload:
                    raise ValueError("set_param needs a value")
                self.commands.put((client, kind, payload, msg_id))
            elif kind == "subscribe_testpoint":
                c = self._channel(payload)
                name = payload.get("name")
                if name not in CHANNEL_TESTPOINTS:
                    raise ValueError(f"unknown test point {name!r}")
                dec = int(payload.get("decimation", 1))
                if dec < 1:
                    raise ValueError("decimation must be >= 1")
                client.testpoints[(c, name)] = dec
                client.send(encode("ack", {"channel": c, "name": name, "decimation": dec}, msg_id))
            elif kind == "counter_log":
                c = self._channel(payload)
                start = int(payload.get("from_gate", 0))
                with self.log_lock:
                    recs = [_record_payload(c, r) for r in self.records[c][max(start, 0):]]
                    # registering under the same lock means no gate falls between
                    # the backfill and the live stream
                    client.send(encode("ack", {"channel": c, "records": recs}, msg_id))
                    if payload.get("follow", False):
                        client.follow.add(c)
                    else:
                        client.follow.discard(c)
            else:
                raise ValueError(f"unknown or reply-only kind {kind!r}")
        except (ValueError, TypeError, ConfigError) as exc:
            client.send(encode("error", {"message": str(exc)}, msg_id))

    def _channel(self, payload) -> int:
        c = payload.get("channel", 0)
        if not isinstance(c, int) or not 0 <= c < len(self.cfg.channels):
            raise ValueError(f"no channel {c!r}")
        return c

    def _drain(self):
        """Apply queued parameter commands; called only between chunks."""
        while True:
            try:
                client, kind, payload, msg_id = self.commands.get_nowait()
            except queue.Empty:
                return
            c, name = payload.get("channel", 0), payload["name"]
            field_name, decode, enc = PARAMS[name]
            try:
                if kind == "set_param":
                    self.engine.retune(c, **{field_name: decode(payload["value"])})
                value = enc(getattr(self.engine.cfg.channels[c], field_name))
                client.send(encode("ack", {"channel": c, "name": name, "value": value}, msg_id))
            except (ValueError, TypeError, ConfigError) as exc:
                client.send(encode("error", {"message": str(exc)}, msg_id))

    # ---------------------------------------------------------------- simulation
    def _run(self):
        try:
            while not self._stop.is_set():
                if self.max_samples is not None and self.samples_done >= self.max_samples:
                    break
                self._drain()
                n = self.chunk
                if self.max_samples is not None:
                    n = min(n, self.max_samples - self.samples_done)
                start = self.engine.sample
                out = self.engine.advance(n)
                self.samples_done += n
                self._publish(start, out)
                if self.pace:
                    self._stop.wait(self.pace)
        finally:
            self.finished.set()
        # keep answering parameter reads after the run ends
        while not self._stop.wait(0.05):
            self._drain()

    def _live_clients(self) -> list:
        with self.clients_lock:
            return [c for c in self.clients if c.alive]

    def _publish(self, start: int, out: dict):
        for c, counter in enumerate(self.counters):
            recs = counter.update(out[(c, "phase_increment")])
            if not recs:
                continue
            with self.log_lock:
                # followers are looked up under the log lock: a client registering
                # concurrently either gets these records in its backfill or here
                self.records[c].extend(recs)
                lines = b"".join(encode("counter_log", _record_payload(c, r)) for r in recs)
                for cl in self._live_clients():
                    if c in cl.follow:
                        cl.send(lines)
        clients = self._live_clients()
        for cl in clients:
            for (c, name), dec in list(cl.testpoints.items()):
                x = out[(c, name)][::dec]
                cl.send(encode("subscribe_testpoint", {
                    "channel": c, "name": name, "column": trace_column_name((c, name)),
                    "first_sample": start, "decimation": dec,
                    "values": [float(v) for v in np.asarray(x)]}))

    def wait(self, timeout: float | None = None) -> bool:
        """Block until the bounded run has finished."""
        return self.finished.wait(timeout)


def serve_monitor(cfg: SimConfig, port: int = 0, host: str = "127.0.0.1", **kw) -> MonitorServer:
    """Start a monitor server (already running) for ``cfg``."""
    return MonitorServer(cfg, host, port, **kw).start()
