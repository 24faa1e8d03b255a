import numpy as np
import pytest

from datetime import datetime, timedelta, timezone

from wxpipe.records import PairedDataset, RawSample

T0 = datetime(2019, 3, 1, tzinfo=timezone.utc)


def make_sample(minute: int = 0, ap=1013.25, at=22.5, rh=61.0, rg=0, ws=0,
                wd=81, uptime=None) -> RawSample:
    return RawSample(
        ap_raw=ap, at_raw=at, rh_raw=rh, rg_pulses=rg, ws_pulses=ws,
        wd_adc=wd, uptime_ms=uptime if uptime is not None else 60_000 * (minute + 1),
        t_ts=T0 + timedelta(minutes=minute),
    )


class ListStore:
    """Minimal in-memory stand-in for RawStore on the query side."""

    def __init__(self, samples):
        self.samples = sorted(samples, key=lambda s: s.t_ts)

    def query_range(self, station_id, t_from, t_to):
        return [s for s in self.samples if t_from <= s.t_ts < t_to]


def affine_paired(sensor: str = "AT", n: int = 720, gain: float = 1.07,
                  offset: float = -1.0, sigma: float = 0.3,
                  seed: int = 0, spread: float = 7.0,
                  base: float = 24.0, drift: float = 0.15) -> PairedDataset:
    """Synthetic hourly pairing: reference with diurnal shape plus drift,
    low-cost channel affinely distorted with Gaussian noise."""
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    truth = (base + spread * np.sin(2 * np.pi * ((idx % 24) - 9) / 24.0)
             + drift * rng.normal(0, 1.5, n).cumsum())
    lc = gain * truth + offset + rng.normal(0, sigma, n)
    cov = np.column_stack([
        1013.0 + rng.normal(0, 2.0, n),
        np.zeros(n),
        60.0 - 0.5 * truth + rng.normal(0, 3.0, n),
        np.zeros(n),
        np.abs(rng.normal(1.5, 0.8, n)),
        rng.uniform(0.0, 360.0, n),
    ])
    from wxpipe.records import SENSORS
    cov[:, SENSORS.index(sensor)] = lc
    hours = tuple(T0 + timedelta(hours=int(i)) for i in idx)
    return PairedDataset(sensor=sensor, hours=hours, lcaws=lc, pws=truth,
                         covariates=cov)


@pytest.fixture
def paired_at() -> PairedDataset:
    return affine_paired()
