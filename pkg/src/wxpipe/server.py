"""Telemetry ingestion: TCP frame server and the append-only raw store.

The store is a single newline-delimited log.  Each batch appends its record
lines (the batch CSV rows prefixed by station_id and seq) followed by one
COMMIT line naming the record count; the whole group is written with a
single write and fsynced before the server ACKs.  Recovery at open scans the
log and truncates an unterminated trailing group, so a crash can lose at
most the batch that was never acknowledged.
"""

from __future__ import annotations

import logging
import os
import socketserver
import struct
import threading
from datetime import datetime
from pathlib import Path

from .records import (
    MalformedRecord, RawSample, SampleBatch, parse_batch, parse_record_fields,
    format_ts,
)
from .station import ACK, NAK

log = logging.getLogger(__name__)

MAX_FRAME = 16 * 1024 * 1024


class UnknownStation(KeyError):
    pass


class RawStore:
    """Durable, deduplicated raw-sample storage for any number of stations."""

    LOG_NAME = "raw.log"

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.path = self.root / self.LOG_NAME
        self._lock = threading.Lock()
        self._seen: set[tuple[str, int]] = set()
        self._samples: dict[str, list[tuple[datetime, int, RawSample]]] = {}
        self._sorted = True
        self._recover()
        self._fh = open(self.path, "ab")

    # -- recovery ----------------------------------------------------------

    def _recover(self) -> None:
        if not self.path.exists():
            self.path.touch()
            return
        data = self.path.read_bytes()
        good_end = 0
        pos = 0
        group: list[tuple[str, int, RawSample]] = []
        group_key: tuple[str, int] | None = None
        while pos < len(data):
            nl = data.find(b"\n", pos)
            if nl < 0:
                break  # partial trailing line
            line = data[pos:nl].decode("ascii", errors="replace")
            pos = nl + 1
            try:
                parsed = self._parse_log_line(line)
            except MalformedRecord as exc:
                log.warning("store log damaged (%s); truncating", exc)
                break
            if parsed[0] == "commit":
                _tag, sid, seq, count = parsed
                if group_key != (sid, seq) or len(group) != count:
                    log.warning("store log: bad commit for %s/%s; truncating",
                                sid, seq)
                    break
                if (sid, seq) in self._seen:
                    log.warning("store log: duplicate %s/%s skipped", sid, seq)
                else:
                    for s, q, sample in group:
                        self._samples.setdefault(s, []).append(
                            (sample.t_ts, q, sample))
                    self._seen.add((sid, seq))
                group, group_key = [], None
                good_end = pos
            else:
                _tag, sid, seq, sample = parsed
                if group_key is None:
                    group_key = (sid, seq)
                elif group_key != (sid, seq):
                    log.warning("store log: interleaved groups; truncating")
                    break
                group.append((sid, seq, sample))
        if good_end < len(data):
            log.warning("store log: dropping %d trailing bytes",
                        len(data) - good_end)
            with open(self.path, "r+b") as fh:
                fh.truncate(good_end)
        self._sorted = False

    @staticmethod
    def _parse_log_line(line: str):
        fields = line.split(",")
        if fields[0] == "COMMIT":
            if len(fields) != 4:
                raise MalformedRecord(f"bad commit line {line!r}")
            return ("commit", fields[1], int(fields[2]), int(fields[3]))
        if len(fields) != 10:
            raise MalformedRecord(f"bad record line {line!r}")
        sample = parse_record_fields(fields[2:])
        return ("record", fields[0], int(fields[1]), sample)

    # -- writes ------------------------------------------------------------

    def append(self, batch: SampleBatch) -> bool:
        """Durably append a batch; returns False for a duplicate (already
        stored) without touching the log."""
        with self._lock:
            key = (batch.station_id, batch.seq)
            if key in self._seen:
                return False
            lines = []
            for s in batch.samples:
                lines.append(
                    f"{batch.station_id},{batch.seq},{format_ts(s.t_ts)},"
                    f"{s.ap_raw:.2f},{s.at_raw:.2f},{s.rh_raw:.2f},"
                    f"{s.rg_pulses},{s.ws_pulses},{s.wd_adc},{s.uptime_ms}\n")
            lines.append(
                f"COMMIT,{batch.station_id},{batch.seq},{len(batch.samples)}\n")
            self._fh.write("".join(lines).encode("ascii"))
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._seen.add(key)
            bucket = self._samples.setdefault(batch.station_id, [])
            for s in batch.samples:
                bucket.append((s.t_ts, batch.seq, s))
            self._sorted = False
            return True

    def has(self, station_id: str, seq: int) -> bool:
        with self._lock:
            return (station_id, seq) in self._seen

    # -- reads -------------------------------------------------------------

    def _ensure_sorted(self) -> None:
        if not self._sorted:
            for bucket in self._samples.values():
                bucket.sort(key=lambda row: (row[0], row[1]))
            self._sorted = True

    def query_range(self, station_id: str, t_from: datetime,
                    t_to: datetime) -> list[RawSample]:
        """Samples with t_from <= t_ts < t_to, ordered by timestamp."""
        if not t_from < t_to:
            raise ValueError("query needs t_from < t_to")
        with self._lock:
            if station_id not in self._samples:
                raise UnknownStation(station_id)
            self._ensure_sorted()
            return [s for ts, _seq, s in self._samples[station_id]
                    if t_from <= ts < t_to]

    def stations(self) -> list[str]:
        with self._lock:
            return sorted(self._samples)

    def batch_count(self) -> int:
        with self._lock:
            return len(self._seen)

    def sample_count(self, station_id: str) -> int:
        with self._lock:
            return len(self._samples.get(station_id, []))

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()


class _FrameHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        store: RawStore = self.server.store  # type: ignore[attr-defined]
        sock = self.request
        sock.settimeout(30.0)
        try:
            while True:
                header = _read_exact(sock, 4)
                if header is None:
                    return
                (length,) = struct.unpack(">I", header)
                if length == 0 or length > MAX_FRAME:
                    sock.sendall(NAK)
                    return
                payload = _read_exact(sock, length)
                if payload is None:
                    return
                try:
                    batch = parse_batch(payload)
                except ValueError as exc:
                    log.info("rejected frame from %s: %s",
                             self.client_address, exc)
                    sock.sendall(NAK)
                    continue
                store.append(batch)  # duplicate => False, still ACK
                sock.sendall(ACK)
        except (OSError, ValueError) as exc:
            log.debug("connection %s closed: %s", self.client_address, exc)


def _read_exact(sock, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class IngestServer:
    """Threaded TCP server bound to a RawStore; stop() is restart-safe."""

    def __init__(self, store: RawStore, host: str = "127.0.0.1",
                 port: int = 0):
        self.store = store
        self._server = _Server((host, port), _FrameHandler)
        self._server.store = store  # type: ignore[attr-defined]
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        host, port = self._server.server_address[:2]
        return str(host), int(port)

    def start(self) -> "IngestServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever,
            kwargs={"poll_interval": 0.05},
            name="wxpipe-ingest", daemon=True)
        self._thread.start()
        log.info("ingest server on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5.0)
            self._thread = None


def serve(bind_addr: tuple[str, int], store: RawStore) -> IngestServer:
    return IngestServer(store, bind_addr[0], bind_addr[1]).start()
