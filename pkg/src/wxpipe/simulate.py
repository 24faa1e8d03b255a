"""Synthetic minute weather and the inverse sensor models.

gen_weather produces a statistically plausible ground-truth trace (it is a
shape generator, not a physics model).  The transduce_* functions invert the
station's sensors: given true weather they emit the counters and ADC codes a
real datalogger would read.  DistortionProfile injects an affine error plus
Gaussian noise per channel to emulate the gap between a cheap station and the
reference instrument.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timedelta
from typing import Sequence

import numpy as np

from .records import COUNTER_MAX, HourlyRecord
from .processing import (
    ProcessingConfig, iir_filter, wind_vector_means, wd_mean, ws_mean,
)


class UnknownScenario(ValueError):
    pass


class PartialHour(ValueError):
    """Reference aggregation needs whole hours of minute data."""


@dataclass(frozen=True)
class WeatherMinute:
    """Ground truth for one minute."""

    t_ts: datetime
    ap: float           # hPa
    at: float           # degC
    rh: float           # %
    rain_rate: float    # mm/min
    wind_speed: float   # m/s
    wind_dir: float     # deg, [0, 360)

    def __post_init__(self) -> None:
        if self.ap < 0 or not 0 <= self.rh <= 100:
            raise ValueError("ap must be >= 0 and rh in [0, 100]")
        if self.rain_rate < 0 or self.wind_speed < 0:
            raise ValueError("rain_rate and wind_speed must be >= 0")
        if not 0 <= self.wind_dir < 360:
            raise ValueError(f"wind_dir out of [0, 360): {self.wind_dir}")


@dataclass(frozen=True)
class ChannelDistortion:
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


_IDENTITY = ChannelDistortion()


@dataclass(frozen=True)
class DistortionProfile:
    """Per-channel affine error model, seeded for reproducible noise."""

    seed: int = 0
    ap: ChannelDistortion = _IDENTITY
    at: ChannelDistortion = _IDENTITY
    rh: ChannelDistortion = _IDENTITY
    rg: ChannelDistortion = _IDENTITY
    ws: ChannelDistortion = _IDENTITY
    wd: ChannelDistortion = _IDENTITY

    @classmethod
    def identity(cls, seed: int = 0) -> "DistortionProfile":
        return cls(seed=seed)

    @classmethod
    def default_gap(cls, seed: int = 0) -> "DistortionProfile":
        """A plausible cheap-station error: mild per-channel bias plus noise."""
        return cls(
            seed=seed,
            ap=ChannelDistortion(1.002, -0.8, 0.25),
            at=ChannelDistortion(1.07, -1.0, 0.30),
            rh=ChannelDistortion(0.95, 3.0, 1.50),
            rg=ChannelDistortion(0.85, 0.0, 0.0),
            ws=ChannelDistortion(1.12, 0.10, 0.15),
            wd=ChannelDistortion(1.0, 10.0, 8.0),
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DistortionProfile":
        raw = json.loads(text)
        channels = {k: ChannelDistortion(**raw[k])
                    for k in ("ap", "at", "rh", "rg", "ws", "wd") if k in raw}
        return cls(seed=int(raw.get("seed", 0)), **channels)


@dataclass(frozen=True)
class _Scenario:
    ap_amp: float
    at_base: float
    at_amp: float
    rh_base: float
    rh_amp: float
    p_wet_start: float      # per-minute chance a dry spell turns wet
    p_wet_stop: float       # per-minute chance a wet spell ends
    rain_rate_mean: float   # mm/min while wet
    ws_base: float
    ws_amp: float
    ws_noise: float
    dir_walk_deg: float


SCENARIOS: dict[str, _Scenario] = {
    "calm": _Scenario(1.5, 20.0, 5.0, 55.0, 15.0, 0.0, 1.0, 0.0,
                      0.6, 0.4, 0.15, 2.0),
    "rainy-season": _Scenario(3.0, 24.0, 7.0, 62.0, 30.0, 0.004, 0.05, 0.12,
                              1.6, 1.2, 0.5, 6.0),
    "storm": _Scenario(5.0, 22.0, 5.0, 70.0, 25.0, 0.02, 0.04, 0.35,
                       6.0, 3.0, 1.5, 12.0),
    "windy": _Scenario(3.5, 18.0, 8.0, 45.0, 20.0, 0.001, 0.08, 0.08,
                       5.0, 2.5, 1.2, 10.0),
}


def _smooth_walk(rng: np.random.Generator, minutes: int, sigma: float,
                 rho: float = 0.92) -> np.ndarray:
    """AR(1) at hourly knots, linearly interpolated down to minutes."""
    knots = minutes // 60 + 2
    steps = rng.normal(0.0, sigma, size=knots)
    walk = np.empty(knots)
    acc = 0.0
    for i, e in enumerate(steps):
        acc = rho * acc + e
        walk[i] = acc
    t = np.arange(minutes) / 60.0
    return np.interp(t, np.arange(knots), walk)


def gen_weather(seed: int, start: datetime, minutes: int,
                scenario: str) -> list[WeatherMinute]:
    """Deterministic ground-truth minutes for a named scenario preset."""
    if scenario not in SCENARIOS:
        raise UnknownScenario(
            f"{scenario!r}; known: {', '.join(sorted(SCENARIOS))}")
    if minutes < 1:
        raise ValueError("minutes must be >= 1")
    sc = SCENARIOS[scenario]
    rng = np.random.default_rng([seed, zlib.crc32(scenario.encode())])

    idx = np.arange(minutes)
    minute_of_day = (start.hour * 60 + start.minute + idx) % 1440
    diurnal = np.sin(2 * np.pi * (minute_of_day - 540) / 1440.0)  # peak ~15:00

    at = sc.at_base + sc.at_amp * diurnal + _smooth_walk(rng, minutes, 0.8)
    ap = 1013.0 + sc.ap_amp * _smooth_walk(rng, minutes, 0.35, rho=0.97) \
        - 0.8 * diurnal
    rh = sc.rh_base - sc.rh_amp * diurnal + _smooth_walk(rng, minutes, 2.5)

    # bursty rain episodes via a two-state chain
    rain = np.zeros(minutes)
    if sc.p_wet_start > 0:
        u = rng.random(minutes)
        rates = rng.exponential(sc.rain_rate_mean, size=minutes)
        wet = False
        for i in range(minutes):
            if wet:
                if u[i] < sc.p_wet_stop:
                    wet = False
                else:
                    rain[i] = rates[i]
            elif u[i] < sc.p_wet_start:
                wet = True
                rain[i] = rates[i]
        rh = rh + 12.0 * np.minimum(rain, 1.0)

    ws = (sc.ws_base + sc.ws_amp * diurnal
          + _smooth_walk(rng, minutes, sc.ws_noise)
          + 2.0 * np.minimum(rain, 1.0))
    wd = (200.0 + _smooth_walk(rng, minutes, sc.dir_walk_deg, rho=0.99)
          + rng.normal(0.0, 2.0, size=minutes)) % 360.0

    ap = np.maximum(ap, 0.0)
    rh = np.clip(rh, 2.0, 100.0)
    ws = np.maximum(ws, 0.0)
    wd = np.where(wd >= 360.0, 0.0, wd)

    return [
        WeatherMinute(
            t_ts=start + timedelta(minutes=int(i)),
            ap=float(ap[i]), at=float(at[i]), rh=float(rh[i]),
            rain_rate=float(rain[i]), wind_speed=float(ws[i]),
            wind_dir=float(wd[i]),
        )
        for i in idx
    ]


def transduce_rain(truth: Sequence[WeatherMinute], mm_per_tip: float = 0.25,
                   counter0: int = 0) -> list[int]:
    """Cumulative tip counts per minute; water below one bucket volume is
    carried forward, and the counter wraps at 16 bits."""
    if mm_per_tip <= 0:
        raise ValueError("mm_per_tip must be positive")
    counters = []
    counter = counter0
    residual = 0.0
    for m in truth:
        residual += m.rain_rate
        tips = int(residual // mm_per_tip)
        residual -= tips * mm_per_tip
        counter = (counter + tips) % (COUNTER_MAX + 1)
        counters.append(counter)
    return counters


def transduce_wind(truth: Sequence[WeatherMinute],
                   circumference_m: float = 0.924, counter0: int = 0,
                   uptime0_ms: int = 0) -> tuple[list[int], list[int]]:
    """Cumulative revolution counts and uptimes, one reading per minute."""
    if circumference_m <= 0:
        raise ValueError("circumference_m must be positive")
    counters, uptimes = [], []
    counter, uptime = counter0, uptime0_ms
    for m in truth:
        counter = (counter + round(60.0 * m.wind_speed / circumference_m)) \
            % (COUNTER_MAX + 1)
        uptime += 60_000
        counters.append(counter)
        uptimes.append(uptime)
    return counters, uptimes


def transduce_vane(wind_dir: float, cfg: ProcessingConfig | None = None) -> int:
    """Ideal ADC code for a direction: quantize to the nearest vane position
    (ties go to the higher angle) and evaluate the voltage divider.

    The ADC truncates, so the code is the integer part of
    code_max * R_ref / (R_ref + R_position).
    """
    cfg = cfg or ProcessingConfig()
    if not 0 <= wind_dir < 360:
        raise ValueError(f"wind_dir out of [0, 360): {wind_dir}")
    pos = int(wind_dir / cfg.angle_res_deg + 0.5) % len(cfg.ladder_ohm)
    r_pos = cfg.ladder_ohm[pos]
    return int(cfg.adc_code_max * cfg.r_ref_ohm / (cfg.r_ref_ohm + r_pos))


def transduce_digital(truth: Sequence[WeatherMinute],
                      profile: DistortionProfile,
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distorted (ap, at, rh) readings: gain * x + offset + N(0, sigma)."""
    n = len(truth)
    noise = np.random.default_rng([profile.seed, 0]).standard_normal((n, 3))
    out = []
    for j, (ch, col) in enumerate((
            (profile.ap, np.array([m.ap for m in truth])),
            (profile.at, np.array([m.at for m in truth])),
            (profile.rh, np.array([m.rh for m in truth])))):
        out.append(ch.gain * col + ch.offset + ch.noise_sigma * noise[:, j])
    return out[0], out[1], out[2]


def distort_truth(truth: Sequence[WeatherMinute],
                  profile: DistortionProfile) -> list[WeatherMinute]:
    """Weather as experienced by the cheap station's magnetic sensors:
    rain/wind channels distorted, clamped back into physical ranges."""
    n = len(truth)
    noise = np.random.default_rng([profile.seed, 1]).standard_normal((n, 3))
    out = []
    for i, m in enumerate(truth):
        rain = max(0.0, profile.rg.gain * m.rain_rate + profile.rg.offset
                   + profile.rg.noise_sigma * noise[i, 0])
        speed = max(0.0, profile.ws.gain * m.wind_speed + profile.ws.offset
                    + profile.ws.noise_sigma * noise[i, 1])
        direction = (profile.wd.gain * m.wind_dir + profile.wd.offset
                     + profile.wd.noise_sigma * noise[i, 2]) % 360.0
        if direction >= 360.0:
            direction = 0.0
        out.append(replace(m, rain_rate=rain, wind_speed=speed,
                           wind_dir=direction))
    return out


def emit_reference_hourly(truth: Sequence[WeatherMinute]) -> list[HourlyRecord]:
    """Hourly aggregation of undistorted truth, used as the reference-station
    output: arithmetic means for digital channels, total depth for rain,
    vector means for wind."""
    if not truth:
        raise PartialHour("no minutes supplied")
    first = truth[0].t_ts
    if first.minute != 0 or first.second != 0:
        raise PartialHour(f"trace must start on the hour, got {first}")
    if len(truth) % 60 != 0:
        raise PartialHour(f"{len(truth)} minutes is not whole hours")
    for prev, cur in zip(truth, truth[1:]):
        if (cur.t_ts - prev.t_ts) != timedelta(minutes=1):
            raise PartialHour("trace is not contiguous minutes")

    out = []
    for h in range(len(truth) // 60):
        chunk = truth[h * 60:(h + 1) * 60]
        x_bar, y_bar = wind_vector_means(
            [m.wind_speed for m in chunk], [m.wind_dir for m in chunk])
        direction, _calm = wd_mean(x_bar, y_bar)
        out.append(HourlyRecord(
            hour_start=chunk[0].t_ts,
            ap_mean=math.fsum(m.ap for m in chunk) / 60.0,
            at_mean=math.fsum(m.at for m in chunk) / 60.0,
            rh_mean=math.fsum(m.rh for m in chunk) / 60.0,
            rg_sum=math.fsum(m.rain_rate for m in chunk),
            ws_mean=ws_mean(x_bar, y_bar),
            wd_mean=direction,
            n_samples=60,
        ))
    return out


class SensorReadFailure(RuntimeError):
    """A sensor could not be read; carries the sensor name."""

    def __init__(self, sensor: str, reason: str = ""):
        super().__init__(f"{sensor}: {reason}" if reason else sensor)
        self.sensor = sensor


class SimulatedSensors:
    """Plays back a precomputed truth trace through the sensor models.

    Digital readings are quantized to the 0.01 resolution carried by the
    batch format (disable with quantize=False for exact-arithmetic tests);
    humidity is clamped into its physical range after distortion.
    """

    def __init__(self, truth: Sequence[WeatherMinute],
                 profile: DistortionProfile | None = None,
                 cfg: ProcessingConfig | None = None,
                 counter0_rain: int = 0, counter0_wind: int = 0,
                 uptime0_ms: int = 0, quantize: bool = True):
        cfg = cfg or ProcessingConfig()
        profile = profile or DistortionProfile.identity()
        magnetic_truth = distort_truth(truth, profile)
        ap, at, rh = transduce_digital(truth, profile)
        if cfg.filter_k:
            for col in (ap, at, rh):
                state = col[0]
                for i in range(len(col)):
                    state = iir_filter(state, col[i], cfg.filter_k)
                    col[i] = state
        if quantize:
            ap, at, rh = np.round(ap, 2), np.round(at, 2), np.round(rh, 2)
        self._ap = np.maximum(ap, 0.0)
        self._at = at
        self._rh = np.clip(rh, 0.0, 100.0)
        self._rg = transduce_rain(magnetic_truth, cfg.mm_per_tip, counter0_rain)
        self._ws, self._uptimes = transduce_wind(
            magnetic_truth, cfg.circumference_m, counter0_wind, uptime0_ms)
        self._wd = [transduce_vane(m.wind_dir, cfg) for m in magnetic_truth]
        self._i = 0
        self.size = len(truth)

    @property
    def exhausted(self) -> bool:
        return self._i >= self.size

    def read(self, sensor: str):
        if self.exhausted:
            raise SensorReadFailure(sensor, "trace exhausted")
        i = self._i
        try:
            return {
                "AP": lambda: float(self._ap[i]),
                "AT": lambda: float(self._at[i]),
                "RH": lambda: float(self._rh[i]),
                "RG": lambda: self._rg[i],
                "WS": lambda: self._ws[i],
                "WD": lambda: self._wd[i],
            }[sensor]()
        except KeyError:
            raise SensorReadFailure(sensor, "unknown sensor") from None

    def uptime_ms(self) -> int:
        return self._uptimes[self._i]

    def advance(self) -> None:
        self._i += 1
