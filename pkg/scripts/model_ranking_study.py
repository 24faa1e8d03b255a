#!/usr/bin/env python3
"""Rank the candidate learners on a simulated month of paired data.

Runs the seeded (learner x seed) sweep on one sensor and prints the ranking
table, optionally at several sweep sizes to show how the spread tightens.

    python scripts/model_ranking_study.py --sensor WS --seeds 25 50
"""

import argparse
import sys
import time
from datetime import datetime, timedelta, timezone

from wxpipe.calibration import pair_hourly, rank_models, run_experiments
from wxpipe.learners import KINDS, default_candidates
from wxpipe.metrics import r2, significance_code
from wxpipe.processing import ProcessingConfig, process_range, floor_hour
from wxpipe.records import SENSORS
from wxpipe.simulate import (
    DistortionProfile, SimulatedSensors, emit_reference_hourly, gen_weather,
)
from wxpipe.station import VirtualClock, get_sensordata


class _MemoryStore:
    def __init__(self, samples):
        self.samples = samples

    def query_range(self, _sid, a, b):
        return [s for s in self.samples if a <= s.t_ts < b]


def simulated_pairing(sensor, days, scenario, seed):
    start = datetime(2019, 3, 1, tzinfo=timezone.utc)
    trace = gen_weather(seed, start - timedelta(minutes=1), days * 1440 + 1,
                        scenario)
    sensors = SimulatedSensors(trace, DistortionProfile.default_gap(seed))
    clock = VirtualClock(trace[0].t_ts)
    samples = []
    for _ in range(len(trace)):
        samples.append(get_sensordata(sensors, clock))
        clock.sleep(60)
    lcaws = process_range(_MemoryStore(samples), "S", floor_hour(trace[0].t_ts),
                          start + timedelta(days=days), ProcessingConfig())
    pws = emit_reference_hourly(trace[1:])
    return pair_hourly(lcaws, pws, sensor)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sensor", default="WS", choices=SENSORS)
    ap.add_argument("--days", type=int, default=30)
    ap.add_argument("--scenario", default="rainy-season")
    ap.add_argument("--seed", type=int, default=3)
    ap.add_argument("--seeds", type=int, nargs="+", default=[25])
    ap.add_argument("--forest-trees", type=int, default=25)
    args = ap.parse_args(argv)

    data = simulated_pairing(args.sensor, args.days, args.scenario, args.seed)
    print(f"{len(data)} paired hours on {args.sensor} "
          f"({args.days} days of {args.scenario!r})")
    base = default_candidates(n_trees=args.forest_trees)

    for n_seeds in args.seeds:
        seeds = list(range(1, n_seeds + 1))
        t0 = time.time()
        results = run_experiments(data, list(KINDS), seeds, base=base)
        baseline = {
            s: r2(data.pws[results[(KINDS[0], s)].test_idx],
                  data.lcaws[results[(KINDS[0], s)].test_idx])
            for s in seeds
        }
        rows = rank_models(results, baseline_r2=baseline)
        print(f"\n=== {n_seeds} seeds ({time.time() - t0:.1f}s) ===")
        print(f"{'rank':>4} {'model':<9} {'avg R2':>9} {'+-SD':>9} "
              f"{'t':>8} {'p':>10}")
        for row in rows:
            t_txt = "" if row.t_value is None else f"{row.t_value:8.2f}"
            p_txt = "" if row.p_value is None else (
                f"{row.p_value:10.4g}{significance_code(row.p_value)}")
            print(f"{row.rank:>4} {row.kind:<9} {row.r2_mean:9.4f} "
                  f"{row.r2_sd:9.4f} {t_txt:>8} {p_txt:>10}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
