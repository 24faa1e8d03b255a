"""Shared domain records and the station batch file format.

The batch file is the unit of transfer between a station and the ingestion
server.  It is a plain LF-terminated text format:

    LCAWS,<station_id>,<seq>,<n_records>
    <ts>,<ap>,<at>,<rh>,<rg_pulses>,<ws_pulses>,<wd_adc>,<uptime_ms>   (x n_records)
    CRC32,<8 hex digits>

The checksum covers every byte that precedes its own line.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from datetime import datetime, timezone
from functools import cached_property
from typing import Sequence

import numpy as np

SENSORS = ("AP", "AT", "RH", "RG", "WS", "WD")

COUNTER_MAX = 0xFFFF        # cumulative pulse counters are 16-bit unsigned
ADC_CODE_MAX = 0xFF         # vane codes live in 8 bits after the 10->8 reduction
UPTIME_MAX = 2**64 - 1
SEQ_MAX = 2**64 - 1

_STATION_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")
_TS_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class ChecksumMismatch(ValueError):
    """Batch payload does not match its trailing CRC32."""


class MalformedRecord(ValueError):
    """A batch line has the wrong shape or an out-of-range field."""


class EmptyBatch(ValueError):
    """A batch must carry at least one sample."""


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(_TS_FORMAT)


def parse_ts(text: str) -> datetime:
    try:
        return datetime.strptime(text, _TS_FORMAT).replace(tzinfo=timezone.utc)
    except ValueError as exc:
        raise MalformedRecord(f"bad timestamp {text!r}") from exc


def _check_utc_seconds(ts: datetime, what: str) -> None:
    if ts.tzinfo is None or ts.utcoffset() is None:
        raise ValueError(f"{what} must be timezone-aware")
    if ts.microsecond != 0:
        raise ValueError(f"{what} carries sub-second precision: {ts!r}")


@dataclass(frozen=True)
class RawSample:
    """One per-minute acquisition: three filtered digital readings, two
    cumulative pulse counters, the vane ADC code, datalogger uptime and the
    acquisition timestamp."""

    ap_raw: float
    at_raw: float
    rh_raw: float
    rg_pulses: int
    ws_pulses: int
    wd_adc: int
    uptime_ms: int
    t_ts: datetime

    def __post_init__(self) -> None:
        _check_utc_seconds(self.t_ts, "t_ts")
        if not self.ap_raw >= 0.0:
            raise ValueError(f"ap_raw must be non-negative, got {self.ap_raw}")
        if not 0.0 <= self.rh_raw <= 100.0:
            raise ValueError(f"rh_raw out of [0, 100]: {self.rh_raw}")
        for name, value, top in (
            ("rg_pulses", self.rg_pulses, COUNTER_MAX),
            ("ws_pulses", self.ws_pulses, COUNTER_MAX),
            ("wd_adc", self.wd_adc, ADC_CODE_MAX),
            ("uptime_ms", self.uptime_ms, UPTIME_MAX),
        ):
            if not isinstance(value, int) or not 0 <= value <= top:
                raise ValueError(f"{name} out of [0, {top}]: {value!r}")


@dataclass(frozen=True)
class SampleBatch:
    """An ordered run of samples from one station, identified by (station_id,
    seq).  The pair is the server-side deduplication key."""

    station_id: str
    seq: int
    samples: tuple[RawSample, ...]

    def __post_init__(self) -> None:
        if not _STATION_ID_RE.match(self.station_id):
            raise ValueError(f"station_id must match [A-Za-z0-9_-]+: {self.station_id!r}")
        if not isinstance(self.seq, int) or not 0 <= self.seq <= SEQ_MAX:
            raise ValueError(f"seq out of range: {self.seq!r}")
        if not self.samples:
            raise EmptyBatch("batch has no samples")
        for prev, cur in zip(self.samples, self.samples[1:]):
            if cur.t_ts < prev.t_ts:
                raise ValueError("samples not ordered by t_ts")
            if cur.uptime_ms <= prev.uptime_ms:
                raise ValueError("uptime_ms not strictly increasing")

    @cached_property
    def crc32(self) -> int:
        return zlib.crc32(_payload_bytes(self))


def _record_line(s: RawSample) -> str:
    return (
        f"{format_ts(s.t_ts)},{s.ap_raw:.2f},{s.at_raw:.2f},{s.rh_raw:.2f},"
        f"{s.rg_pulses},{s.ws_pulses},{s.wd_adc},{s.uptime_ms}\n"
    )


def _payload_bytes(batch: SampleBatch) -> bytes:
    lines = [f"LCAWS,{batch.station_id},{batch.seq},{len(batch.samples)}\n"]
    lines.extend(_record_line(s) for s in batch.samples)
    return "".join(lines).encode("ascii")


def serialize_batch(batch: SampleBatch) -> bytes:
    """Encode a batch into its on-disk / on-wire byte form."""
    payload = _payload_bytes(batch)
    return payload + f"CRC32,{zlib.crc32(payload):08x}\n".encode("ascii")


def parse_record_fields(fields: Sequence[str]) -> RawSample:
    """Build a sample from the 8 CSV fields of one record line."""
    if len(fields) != 8:
        raise MalformedRecord(f"expected 8 fields, got {len(fields)}")
    ts = parse_ts(fields[0])
    try:
        ap, at, rh = float(fields[1]), float(fields[2]), float(fields[3])
        rg, ws, wd, up = (int(fields[i]) for i in range(4, 8))
    except ValueError as exc:
        raise MalformedRecord(f"bad numeric field in {fields!r}") from exc
    try:
        return RawSample(ap, at, rh, rg, ws, wd, up, ts)
    except ValueError as exc:
        raise MalformedRecord(str(exc)) from exc


def parse_batch(data: bytes) -> SampleBatch:
    """Decode and validate a serialized batch.

    Raises ChecksumMismatch before any field-level validation so corrupted
    payloads are never partially trusted, then MalformedRecord / EmptyBatch
    for structural problems.
    """
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedRecord("batch is not ASCII") from exc
    if not text.endswith("\n"):
        raise MalformedRecord("batch does not end with LF")
    lines = text[:-1].split("\n")
    if len(lines) < 2:
        raise MalformedRecord("batch too short")
    crc_line = lines[-1]
    if not crc_line.startswith("CRC32,"):
        raise MalformedRecord("missing CRC32 trailer")
    stated = crc_line[len("CRC32,"):]
    if not re.fullmatch(r"[0-9a-f]{8}", stated):
        raise MalformedRecord(f"bad CRC32 field {stated!r}")
    payload = text[: text.rindex("CRC32,")].encode("ascii")
    if zlib.crc32(payload) != int(stated, 16):
        raise ChecksumMismatch(
            f"stated {stated}, computed {zlib.crc32(payload):08x}"
        )

    header = lines[0].split(",")
    if len(header) != 4 or header[0] != "LCAWS":
        raise MalformedRecord(f"bad header {lines[0]!r}")
    _, station_id, seq_text, count_text = header
    try:
        seq, n_records = int(seq_text), int(count_text)
    except ValueError as exc:
        raise MalformedRecord(f"bad header {lines[0]!r}") from exc
    if n_records == 0:
        raise EmptyBatch("header declares 0 records")
    records = lines[1:-1]
    if len(records) != n_records:
        raise MalformedRecord(
            f"header declares {n_records} records, found {len(records)}"
        )
    samples = tuple(parse_record_fields(line.split(",")) for line in records)
    try:
        return SampleBatch(station_id=station_id, seq=seq, samples=samples)
    except EmptyBatch:
        raise
    except ValueError as exc:
        raise MalformedRecord(str(exc)) from exc


@dataclass(frozen=True)
class HourlyRecord:
    """Weather parameters for one clock hour."""

    hour_start: datetime
    ap_mean: float
    at_mean: float
    rh_mean: float
    rg_sum: float
    ws_mean: float
    wd_mean: float
    n_samples: int

    def __post_init__(self) -> None:
        _check_utc_seconds(self.hour_start, "hour_start")
        if self.hour_start.minute or self.hour_start.second:
            raise ValueError(f"hour_start not hour-aligned: {self.hour_start}")
        if not 0.0 <= self.wd_mean < 360.0:
            raise ValueError(f"wd_mean out of [0, 360): {self.wd_mean}")
        if self.rg_sum < 0.0 or self.ws_mean < 0.0:
            raise ValueError("rg_sum and ws_mean must be non-negative")
        if not 1 <= self.n_samples <= 60:
            raise ValueError(f"n_samples out of [1, 60]: {self.n_samples}")

    def value(self, sensor: str) -> float:
        return {
            "AP": self.ap_mean, "AT": self.at_mean, "RH": self.rh_mean,
            "RG": self.rg_sum, "WS": self.ws_mean, "WD": self.wd_mean,
        }[sensor]


@dataclass(frozen=True)
class PairedDataset:
    """Hour-aligned (low-cost, reference) values for one sensor.

    ``covariates`` holds the six low-cost hourly parameters in SENSORS order,
    one row per paired hour; the matching-sensor column equals ``lcaws``.
    """

    sensor: str
    hours: tuple[datetime, ...]
    lcaws: np.ndarray
    pws: np.ndarray
    covariates: np.ndarray

    def __post_init__(self) -> None:
        if self.sensor not in SENSORS:
            raise ValueError(f"unknown sensor {self.sensor!r}")
        n = len(self.hours)
        if not (self.lcaws.shape == (n,) and self.pws.shape == (n,)):
            raise ValueError("lcaws/pws must be 1-D arrays matching hours")
        if self.covariates.shape != (n, len(SENSORS)):
            raise ValueError(f"covariates must be (n, {len(SENSORS)})")
        if len(set(self.hours)) != n:
            raise ValueError("duplicate hour_start in paired dataset")

    def __len__(self) -> int:
        return len(self.hours)
