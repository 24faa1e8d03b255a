"""Raw minute samples to hourly weather parameters.

Digital channels are averaged arithmetically.  Pulse-counter channels (rain
tips, anemometer revolutions) are differenced with wraparound handling before
conversion to physical units.  Wind statistics are vector means: each speed
sample is decomposed along its direction and the components are averaged, so
opposing winds cancel.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterable, Protocol, Sequence

from .records import COUNTER_MAX, HourlyRecord, RawSample

log = logging.getLogger(__name__)


class EmptyWindow(ValueError):
    """An aggregation was asked for zero samples."""


class InsufficientCounterSamples(ValueError):
    """Counter channels need at least two samples to difference."""


class ZeroTimeDelta(ValueError):
    """Two consecutive samples report the same uptime."""


class ResistanceOutOfRange(ValueError):
    """Vane divider resistance far beyond the ladder: wiring fault."""


@dataclass(frozen=True)
class ProcessingConfig:
    """Constants of the station hardware and of the aggregation window."""

    filter_k: int = 0                   # IIR strength, 0 disables
    mm_per_tip: float = 0.25            # bucket volume as precipitation depth
    circumference_m: float = 0.924      # anemometer cup circle circumference
    ms_per_s: int = 1000
    r_ref_ohm: float = 4700.0           # divider reference resistor
    adc_code_max: int = 255
    spliced_angle_deg: float = 225.0    # vane position whose circuit is open
    angle_res_deg: float = 45.0
    ladder_ohm: tuple[float, ...] = (
        10_000.0, 20_000.0, 30_000.0, 40_000.0,
        50_000.0, 60_000.0, 70_000.0, 80_000.0,
    )
    window_s: int = 3600
    counter_max: int = COUNTER_MAX

    def __post_init__(self) -> None:
        if self.filter_k not in range(5):
            raise ValueError(f"filter_k must be in 0..4, got {self.filter_k}")
        if self.mm_per_tip <= 0 or self.circumference_m <= 0:
            raise ValueError("mm_per_tip and circumference_m must be positive")
        if any(b <= a for a, b in zip(self.ladder_ohm, self.ladder_ohm[1:])):
            raise ValueError("ladder_ohm must be strictly increasing")
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")


def iir_filter(prev_filtered: float, x: float, k: int) -> float:
    """One step of the sensor's low-pass filter; k=0 passes x through."""
    if k not in range(5):
        raise ValueError(f"filter factor must be in 0..4, got {k}")
    coeff = 1 << k
    return (prev_filtered * (coeff - 1) + x) / coeff


def digital_mean(values: Sequence[float]) -> float:
    if len(values) == 0:
        raise EmptyWindow("digital_mean of empty window")
    return math.fsum(values) / len(values)


def lagged_diff(series: Sequence[int], counter_max: int = COUNTER_MAX) -> list[int]:
    """Consecutive counter deltas; a backward step is read as a wrap.

    The wrap branch adds counter_max (not counter_max + 1), so one count is
    lost per wrap relative to modular arithmetic.  That behaviour is the
    device contract and is asserted by the wrap tests.
    """
    if len(series) < 2:
        raise ValueError("lagged_diff needs at least 2 samples")
    out = []
    for cur, nxt in zip(series, series[1:]):
        d = nxt - cur
        out.append(d if d >= 0 else nxt + counter_max - cur)
    return out


def rain_sum(counters: Sequence[int], mm_per_tip: float,
             counter_max: int = COUNTER_MAX) -> float:
    """Precipitation depth in mm from cumulative tip counts."""
    return mm_per_tip * sum(lagged_diff(counters, counter_max))


def wind_speed_series(rev_counters: Sequence[int], uptimes_ms: Sequence[int],
                      circumference_m: float, ms_per_s: int = 1000,
                      counter_max: int = COUNTER_MAX) -> list[float]:
    """Per-interval wind speed in m/s from revolution counts and uptimes."""
    if len(rev_counters) != len(uptimes_ms):
        raise ValueError("rev_counters and uptimes_ms lengths differ")
    revs = lagged_diff(rev_counters, counter_max)
    dts = lagged_diff(uptimes_ms, 2**64 - 1)
    speeds = []
    for dr, dt in zip(revs, dts):
        if dt == 0:
            raise ZeroTimeDelta("consecutive samples share an uptime")
        speeds.append(circumference_m * (dr / dt) * ms_per_s)
    return speeds


def vane_resistance(code: int, cfg: ProcessingConfig | None = None) -> int | None:
    """Ladder resistance implied by an ADC code; None marks the spliced
    position (code 0), where the divider carries no valid voltage."""
    cfg = cfg or _DEFAULT_CFG
    if not 0 <= code <= cfg.adc_code_max:
        raise ValueError(f"ADC code out of range: {code}")
    if code == 0:
        return None
    return round(cfg.r_ref_ohm * (cfg.adc_code_max / code - 1.0))


def vane_angle(code: int, cfg: ProcessingConfig | None = None) -> float:
    """Cardinal angle for an ADC code, via nearest ladder resistor.

    A resistance above twice the top ladder value cannot come from any vane
    position and is reported as a wiring fault.
    """
    cfg = cfg or _DEFAULT_CFG
    resistance = vane_resistance(code, cfg)
    if resistance is None:
        return cfg.spliced_angle_deg
    if resistance > 2 * cfg.ladder_ohm[-1]:
        raise ResistanceOutOfRange(f"{resistance} ohm from code {code}")
    best = min(range(len(cfg.ladder_ohm)),
               key=lambda i: abs(cfg.ladder_ohm[i] - resistance))
    return cfg.angle_res_deg * best


_SQRT2_2 = math.sqrt(2.0) / 2.0
# sin/cos for multiples of 45 degrees, exact where the value is 0 or +-1 so
# that grid directions survive aggregation without rounding residue.
_GRID_COMPONENTS = {
    0.0: (0.0, 1.0), 45.0: (_SQRT2_2, _SQRT2_2), 90.0: (1.0, 0.0),
    135.0: (_SQRT2_2, -_SQRT2_2), 180.0: (0.0, -1.0),
    225.0: (-_SQRT2_2, -_SQRT2_2), 270.0: (-1.0, 0.0), 315.0: (-_SQRT2_2, _SQRT2_2),
}


def _direction_components(theta_deg: float) -> tuple[float, float]:
    grid = _GRID_COMPONENTS.get(theta_deg)
    if grid is not None:
        return grid
    rad = 2.0 * math.pi * theta_deg / 360.0
    return math.sin(rad), math.cos(rad)


def wind_vector_means(speeds: Sequence[float],
                      dirs_deg: Sequence[float]) -> tuple[float, float]:
    """Mean Cartesian wind components (x east-west, y north-south)."""
    if len(speeds) != len(dirs_deg):
        raise ValueError("speeds and dirs lengths differ")
    if len(speeds) == 0:
        raise EmptyWindow("wind_vector_means of empty window")
    n = len(speeds)
    xs, ys = [], []
    for w, theta in zip(speeds, dirs_deg):
        s, c = _direction_components(theta)
        xs.append(-w * s)
        ys.append(-w * c)
    return math.fsum(xs) / n, math.fsum(ys) / n


def ws_mean(x_bar: float, y_bar: float) -> float:
    return math.hypot(x_bar, y_bar)


def wd_mean(x_bar: float, y_bar: float) -> tuple[float, bool]:
    """Mean wind direction in [0, 360) and a calm flag.

    Calm (both components exactly zero) has no defined direction; 0 is
    returned with the flag set.
    """
    if x_bar == 0.0 and y_bar == 0.0:
        return 0.0, True
    deg = math.degrees(math.atan2(x_bar, y_bar)) + 180.0
    deg %= 360.0
    if deg >= 360.0:        # float mod can round a tiny negative up to 360
        deg = 0.0
    return deg, False


def floor_hour(ts: datetime) -> datetime:
    return ts.replace(minute=0, second=0, microsecond=0)


@dataclass(frozen=True)
class _Pair:
    """One consecutive-sample interval, attributed to its second sample."""

    rain_tips: int
    speed: float
    angle: float


def _make_pair(prev: RawSample, cur: RawSample, cfg: ProcessingConfig) -> _Pair:
    tips = lagged_diff([prev.rg_pulses, cur.rg_pulses], cfg.counter_max)[0]
    speed = wind_speed_series(
        [prev.ws_pulses, cur.ws_pulses], [prev.uptime_ms, cur.uptime_ms],
        cfg.circumference_m, cfg.ms_per_s, cfg.counter_max)[0]
    return _Pair(tips, speed, vane_angle(cur.wd_adc, cfg))


def _hour_record(hour_start: datetime, window: Sequence[RawSample],
                 pairs: Sequence[_Pair], cfg: ProcessingConfig) -> HourlyRecord:
    if not window:
        raise EmptyWindow(f"no samples in hour {hour_start}")
    if not pairs:
        raise InsufficientCounterSamples(
            f"hour {hour_start} has no counter interval")
    x_bar, y_bar = wind_vector_means(
        [p.speed for p in pairs], [p.angle for p in pairs])
    direction, calm = wd_mean(x_bar, y_bar)
    if calm:
        log.debug("calm hour %s: wind direction undefined", hour_start)
    return HourlyRecord(
        hour_start=hour_start,
        ap_mean=digital_mean([s.ap_raw for s in window]),
        at_mean=digital_mean([s.at_raw for s in window]),
        rh_mean=digital_mean([s.rh_raw for s in window]),
        rg_sum=cfg.mm_per_tip * sum(p.rain_tips for p in pairs),
        ws_mean=ws_mean(x_bar, y_bar),
        wd_mean=direction,
        n_samples=len(window),
    )


def summarize_hour(samples: Sequence[RawSample],
                   cfg: ProcessingConfig | None = None) -> HourlyRecord:
    """Aggregate the samples of a single window into an HourlyRecord."""
    cfg = cfg or _DEFAULT_CFG
    if not samples:
        raise EmptyWindow("summarize_hour of empty window")
    hour_start = floor_hour(samples[0].t_ts)
    end = hour_start + timedelta(seconds=cfg.window_s)
    if any(not hour_start <= s.t_ts < end for s in samples):
        raise ValueError("samples span more than one window")
    if len(samples) < 2:
        raise InsufficientCounterSamples(
            "counter channels need at least 2 samples per window")
    pairs = [_make_pair(a, b, cfg) for a, b in zip(samples, samples[1:])]
    return _hour_record(hour_start, samples, pairs, cfg)


class SampleSource(Protocol):
    def query_range(self, station_id: str, t_from: datetime,
                    t_to: datetime) -> list[RawSample]: ...


def process_range(store: SampleSource, station_id: str, t_from: datetime,
                  t_to: datetime, cfg: ProcessingConfig | None = None,
                  ) -> list[HourlyRecord]:
    """Hourly records for [t_from, t_to); hours without data are skipped.

    Counter intervals that straddle an hour boundary belong to the hour of
    the interval's second sample, so rain and revolutions accumulated across
    the boundary are credited to the hour in which they were observed.  The
    first sample of the range has no predecessor: if its hour contains no
    other sample the hour is logged and skipped.
    """
    cfg = cfg or _DEFAULT_CFG
    if floor_hour(t_from) != t_from:
        raise ValueError(f"t_from must be hour-aligned, got {t_from}")
    samples = store.query_range(station_id, t_from, t_to)

    windows: dict[datetime, list[RawSample]] = {}
    for s in samples:
        windows.setdefault(floor_hour(s.t_ts), []).append(s)
    pair_groups: dict[datetime, list[_Pair]] = {}
    faulted: dict[datetime, Exception] = {}
    for prev, cur in zip(samples, samples[1:]):
        hour = floor_hour(cur.t_ts)
        try:
            pair_groups.setdefault(hour, []).append(_make_pair(prev, cur, cfg))
        except (ZeroTimeDelta, ResistanceOutOfRange) as exc:
            faulted.setdefault(hour, exc)

    out: list[HourlyRecord] = []
    if windows:
        hour = floor_hour(t_from)
        step = timedelta(seconds=cfg.window_s)
        while hour < t_to:
            if hour not in windows:
                log.debug("hour %s has no samples, skipped", hour)
            hour += step
    for hour in sorted(windows):
        if hour in faulted:
            log.warning("skipping hour %s: %s", hour, faulted[hour])
            continue
        try:
            out.append(_hour_record(hour, windows[hour],
                                    pair_groups.get(hour, []), cfg))
        except (EmptyWindow, InsufficientCounterSamples) as exc:
            log.warning("skipping hour %s: %s", hour, exc)
    return out


def hourly_csv_lines(rows: Iterable[HourlyRecord]) -> list[str]:
    """CSV encoding of hourly records with 4 fractional digits."""
    lines = ["hour_start,ap_mean,at_mean,rh_mean,rg_sum,ws_mean,wd_mean,n_samples\n"]
    for r in rows:
        lines.append(
            f"{r.hour_start.strftime('%Y-%m-%dT%H:%M:%SZ')},"
            f"{r.ap_mean:.4f},{r.at_mean:.4f},{r.rh_mean:.4f},"
            f"{r.rg_sum:.4f},{r.ws_mean:.4f},{r.wd_mean:.4f},{r.n_samples}\n"
        )
    return lines


def parse_hourly_csv(text: str) -> list[HourlyRecord]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("hour_start,"):
        raise ValueError("not an hourly CSV")
    out = []
    for ln in lines[1:]:
        f = ln.split(",")
        if len(f) != 8:
            raise ValueError(f"bad hourly CSV line {ln!r}")
        out.append(HourlyRecord(
            hour_start=datetime.strptime(f[0], "%Y-%m-%dT%H:%M:%SZ").replace(
                tzinfo=timezone.utc),
            ap_mean=float(f[1]), at_mean=float(f[2]), rh_mean=float(f[3]),
            rg_sum=float(f[4]), ws_mean=float(f[5]), wd_mean=float(f[6]),
            n_samples=int(f[7]),
        ))
    return out


_DEFAULT_CFG = ProcessingConfig()
