"""Station-side acquisition loop with store-and-forward delivery.

The client samples its sensors once per period, seals every batch_size
samples into a batch file under the spool directory, and pumps the spool to
the server in sequence order.  Batches survive on disk until the server
acknowledges them, so link outages cost nothing but latency; the server
deduplicates on (station_id, seq), so retries cannot duplicate data.

Framing: a frame is a 4-byte big-endian payload length followed by the
serialized batch; the server answers one byte per frame, ACK (0x06) or
NAK (0x15).  A connection may carry any number of frames.
"""

from __future__ import annotations

import logging
import os
import socket
import struct
import time as _time
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, Protocol

from .records import RawSample, SampleBatch, serialize_batch
from .simulate import SensorReadFailure

log = logging.getLogger(__name__)

ACK = b"\x06"
NAK = b"\x15"


class ConnectFailed(ConnectionError):
    pass


class Timeout(ConnectionError):
    pass


class Nak(RuntimeError):
    """Server rejected the frame; the batch stays spooled for retry."""


class Clock(Protocol):
    def now(self) -> datetime: ...
    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc).replace(microsecond=0)

    def sleep(self, seconds: float) -> None:
        _time.sleep(seconds)


class VirtualClock:
    """Test/accelerated clock: sleeping advances time instantly."""

    def __init__(self, start: datetime):
        if start.tzinfo is None:
            raise ValueError("virtual clock start must be timezone-aware")
        self._now = start

    def now(self) -> datetime:
        return self._now

    def sleep(self, seconds: float) -> None:
        self._now += timedelta(seconds=seconds)


@dataclass(frozen=True)
class ClientConfig:
    station_id: str
    spool_dir: Path
    server_addr: tuple[str, int] | None = None
    batch_size: int = 10
    period_s: float = 60.0
    send_timeout_s: float = 10.0
    backoff_initial_s: float = 1.0
    backoff_max_s: float = 60.0
    spool_max_batches: int = 10_000

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.period_s <= 0:
            raise ValueError("period_s must be positive")


class SensorSource(Protocol):
    def read(self, sensor: str): ...
    def uptime_ms(self) -> int: ...
    def advance(self) -> None: ...


def get_sensordata(sensors: SensorSource, clock: Clock) -> RawSample:
    """One acquisition cycle: read each sensor once, stamp with the clock.

    A failed read aborts the sample but still consumes the cycle: the next
    call reads the next acquisition, not a stale one.
    """
    try:
        values = {name: sensors.read(name)
                  for name in ("AP", "AT", "RH", "RG", "WS", "WD")}
        return RawSample(
            ap_raw=values["AP"], at_raw=values["AT"], rh_raw=values["RH"],
            rg_pulses=values["RG"], ws_pulses=values["WS"],
            wd_adc=values["WD"], uptime_ms=sensors.uptime_ms(),
            t_ts=clock.now(),
        )
    finally:
        sensors.advance()


class BatchSpool:
    """Sequence-ordered batch files; delivered ones keep a .sent suffix.

    Writes are write-then-rename so a crash never leaves a half batch
    visible.  The pending queue is tracked in memory (the client owns the
    directory) and rebuilt from a directory scan at startup.  When the
    backlog exceeds the bound, the oldest pending batch is dropped (recent
    data wins) and counted.
    """

    def __init__(self, root: Path, max_batches: int = 10_000):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.max_batches = max_batches
        self.dropped = 0
        self._pending = deque(sorted(self.root.glob("batch-*.csv"),
                                     key=self._seq_of))

    @staticmethod
    def _seq_of(path: Path) -> int:
        return int(path.name.split("-")[1].split(".")[0])

    def next_seq(self) -> int:
        existing = [self._seq_of(p) for p in self.root.glob("batch-*.csv")]
        existing += [self._seq_of(p) for p in self.root.glob("batch-*.csv.sent")]
        return max(existing) + 1 if existing else 0

    def write(self, batch: SampleBatch) -> Path:
        path = self.root / f"batch-{batch.seq:010d}.csv"
        tmp = path.with_suffix(".tmp")
        data = serialize_batch(batch)
        with open(tmp, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
        self._pending.append(path)
        self._enforce_bound()
        return path

    def _enforce_bound(self) -> None:
        while len(self._pending) > self.max_batches:
            victim = self._pending.popleft()
            victim.unlink()
            self.dropped += 1
            log.warning("spool full: dropped %s", victim.name)

    def pending(self) -> list[Path]:
        return list(self._pending)

    def mark_sent(self, path: Path) -> None:
        os.replace(path, path.with_name(path.name + ".sent"))
        if self._pending and self._pending[0] == path:
            self._pending.popleft()
        else:
            self._pending.remove(path)

    def read(self, path: Path) -> bytes:
        return path.read_bytes()


def send_frames(addr: tuple[str, int], payloads: list[bytes],
                timeout_s: float = 10.0) -> int:
    """Send frames over one connection; returns how many were ACKed before
    the first NAK or error.  Raises only if nothing was delivered."""
    try:
        conn = socket.create_connection(addr, timeout=timeout_s)
    except socket.timeout as exc:
        raise Timeout(str(exc)) from exc
    except OSError as exc:
        raise ConnectFailed(str(exc)) from exc
    delivered = 0
    try:
        with conn:
            for payload in payloads:
                conn.sendall(struct.pack(">I", len(payload)) + payload)
                reply = conn.recv(1)
                if reply == ACK:
                    delivered += 1
                    continue
                if reply == NAK:
                    if delivered == 0:
                        raise Nak("server rejected the batch")
                    return delivered
                raise ConnectionError(f"bad reply {reply!r}")
    except Nak:
        raise
    except socket.timeout as exc:
        if delivered == 0:
            raise Timeout(str(exc)) from exc
    except OSError as exc:
        if delivered == 0:
            raise ConnectFailed(str(exc)) from exc
    return delivered


def send_batch(addr: tuple[str, int], batch: SampleBatch,
               timeout_s: float = 10.0) -> None:
    """One-shot delivery of a single batch; success means the server ACKed."""
    if send_frames(addr, [serialize_batch(batch)], timeout_s) != 1:
        raise ConnectFailed("no ACK received")


@dataclass
class ClientStats:
    sampled: int = 0
    dropped_samples: int = 0
    sealed: int = 0
    delivered: int = 0
    send_failures: int = 0


class StationClient:
    """Algorithmic station loop, driven in discrete acquisition steps."""

    def __init__(self, cfg: ClientConfig, sensors: SensorSource, clock: Clock,
                 transport: Callable[..., int] = send_frames):
        self.cfg = cfg
        self.sensors = sensors
        self.clock = clock
        self.transport = transport
        self.spool = BatchSpool(cfg.spool_dir, cfg.spool_max_batches)
        self.stats = ClientStats()
        self._buffer: list[RawSample] = []
        self._seq = self.spool.next_seq()
        self._backoff = cfg.backoff_initial_s
        self._next_attempt: datetime | None = None

    def step(self) -> None:
        """One acquisition cycle plus whatever delivery work is due."""
        try:
            self._buffer.append(get_sensordata(self.sensors, self.clock))
            self.stats.sampled += 1
        except SensorReadFailure as exc:
            self.stats.dropped_samples += 1
            log.warning("sample dropped, sensor read failed: %s", exc)
        if len(self._buffer) >= self.cfg.batch_size:
            self._seal()
        self.pump()

    def run(self, minutes: int) -> None:
        for _ in range(minutes):
            self.step()
            self.clock.sleep(self.cfg.period_s)
        self.flush()

    def flush(self) -> None:
        """Seal any partial batch and try to drain the spool."""
        if self._buffer:
            self._seal()
        self.pump()

    def _seal(self) -> None:
        batch = SampleBatch(station_id=self.cfg.station_id, seq=self._seq,
                            samples=tuple(self._buffer))
        self.spool.write(batch)
        self._seq += 1
        self._buffer.clear()
        self.stats.sealed += 1

    def pump(self, deadline: datetime | None = None) -> None:
        """Deliver pending batches in FIFO order until empty, failure, or
        deadline; failures arm an exponential backoff on the clock."""
        if self.cfg.server_addr is None:
            return
        if self._next_attempt and self.clock.now() < self._next_attempt:
            return
        pending = self.spool.pending()
        if not pending:
            return
        chunk = 32  # bound per-call work so a deadline is honored
        for start in range(0, len(pending), chunk):
            if deadline is not None and self.clock.now() >= deadline:
                return
            group = pending[start:start + chunk]
            payloads = [self.spool.read(p) for p in group]
            try:
                delivered = self.transport(self.cfg.server_addr, payloads,
                                           self.cfg.send_timeout_s)
            except Nak as exc:
                self.stats.send_failures += 1
                log.warning("server NAK: %s", exc)
                self._arm_backoff()
                return
            except (ConnectFailed, Timeout, ConnectionError, OSError) as exc:
                self.stats.send_failures += 1
                log.debug("delivery failed: %s", exc)
                self._arm_backoff()
                return
            for path in group[:delivered]:
                self.spool.mark_sent(path)
            self.stats.delivered += delivered
            if delivered < len(group):
                self.stats.send_failures += 1
                self._arm_backoff()
                return
        self._backoff = self.cfg.backoff_initial_s
        self._next_attempt = None

    def _arm_backoff(self) -> None:
        self._next_attempt = self.clock.now() + timedelta(seconds=self._backoff)
        self._backoff = min(self._backoff * 2.0, self.cfg.backoff_max_s)
