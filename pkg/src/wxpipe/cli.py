"""wxpipe command line: simulate, run stations and servers, process raw data,
evaluate, calibrate, and drive the whole pipeline end to end.

Exit codes: 0 success, 2 usage error, 3 data error, 4 internal error.
Every subcommand that writes files also writes a manifest recording the
resolved flags, so a run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import time
from datetime import datetime, timedelta, timezone
from pathlib import Path

from . import __version__
from .calibration import (
    final_correction, pair_hourly, paired_csv_lines, parse_paired_csv,
    rank_models, run_experiments,
)
from .learners import KINDS, default_candidates, save_model
from .metrics import build_report, r2, significance_code
from .processing import (
    floor_hour, hourly_csv_lines, parse_hourly_csv, process_range,
)
from .records import SENSORS, HourlyRecord
from .server import IngestServer, RawStore
from .simulate import (
    DistortionProfile, SimulatedSensors, emit_reference_hourly, gen_weather,
)
from .station import ClientConfig, StationClient, SystemClock, VirtualClock

log = logging.getLogger("wxpipe")

DATA_ERRORS = (ValueError, KeyError, OSError)


class MissingInput(ValueError):
    pass


# ---------------------------------------------------------------------------
# small parsing helpers

def parse_when(text: str) -> datetime:
    for fmt in ("%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%MZ", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            continue
    raise ValueError(f"cannot parse timestamp {text!r}")


def parse_period(text: str) -> float:
    units = {"s": 1.0, "m": 60.0, "h": 3600.0}
    if text and text[-1] in units:
        return float(text[:-1]) * units[text[-1]]
    return float(text)


def parse_addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host:
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host, int(port)


def load_profile(text: str) -> DistortionProfile:
    if text == "identity":
        return DistortionProfile.identity()
    if text == "default":
        return DistortionProfile.default_gap()
    return DistortionProfile.from_json(Path(text).read_text())


def write_manifest(path: Path, subcommand: str, flags: dict,
                   outputs: list[str]) -> None:
    doc = {
        "tool": "wxpipe",
        "version": __version__,
        "subcommand": subcommand,
        "flags": {k: (str(v) if isinstance(v, Path) else v)
                  for k, v in flags.items()},
        "outputs": outputs,
        "started_utc": datetime.now(timezone.utc).isoformat(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_lines(path: Path, lines: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(lines))


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    start = parse_when(args.start)
    trace = gen_weather(args.seed, start, args.minutes, args.scenario)
    lines = ["t_ts,ap,at,rh,rain_rate,wind_speed,wind_dir\n"]
    for m in trace:
        lines.append(
            f"{m.t_ts.strftime('%Y-%m-%dT%H:%M:%SZ')},{m.ap:.10g},{m.at:.10g},"
            f"{m.rh:.10g},{m.rain_rate:.10g},{m.wind_speed:.10g},"
            f"{m.wind_dir:.10g}\n")
    _write_lines(Path(args.out), lines)
    outputs = [args.out]
    if args.hourly_out:
        _write_lines(Path(args.hourly_out),
                     hourly_csv_lines(emit_reference_hourly(trace)))
        outputs.append(args.hourly_out)
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "simulate",
                   vars(args) | {"func": None}, outputs)
    print(f"wrote {args.minutes} minutes of {args.scenario!r} to {args.out}")
    return 0


def cmd_station(args) -> int:
    if not args.sim_scenario:
        print("no hardware sensor backend is built in; "
              "use --sim-scenario to run against simulated sensors",
              file=sys.stderr)
        return 2
    spool = Path(os.environ.get("WXPIPE_SPOOL", args.spool))
    start = parse_when(args.start)
    warmup = 1 if args.warmup else 0
    trace = gen_weather(args.seed, start - timedelta(minutes=warmup),
                        args.minutes + warmup, args.sim_scenario)
    profile = load_profile(args.profile)
    sensors = SimulatedSensors(trace, profile)
    clock = VirtualClock(trace[0].t_ts) if args.accel else SystemClock()
    cfg = ClientConfig(
        station_id=args.station_id, spool_dir=spool,
        server_addr=parse_addr(args.server) if args.server else None,
        batch_size=args.batch_size, period_s=parse_period(args.period),
    )
    client = StationClient(cfg, sensors, clock)
    client.run(args.minutes + warmup)
    deadline = 120.0
    waited = 0.0
    while client.spool.pending() and cfg.server_addr and waited < deadline:
        client.clock.sleep(5.0)
        waited += 5.0
        client.pump()
    s = client.stats
    print(f"sampled={s.sampled} dropped={s.dropped_samples} sealed={s.sealed} "
          f"delivered={s.delivered} send_failures={s.send_failures} "
          f"spool_dropped={client.spool.dropped} "
          f"pending={len(client.spool.pending())}")
    return 0


def cmd_server(args) -> int:
    store_dir = Path(os.environ.get("WXPIPE_STORE", args.store))
    store = RawStore(store_dir)
    host, port = parse_addr(args.bind)
    server = IngestServer(store, host, port).start()
    print(f"listening on {server.address[0]}:{server.address[1]}, "
          f"store at {store_dir}", flush=True)
    stop = {"flag": False}

    def _stop(_sig, _frm):
        stop["flag"] = True

    signal.signal(signal.SIGINT, _stop)
    signal.signal(signal.SIGTERM, _stop)
    try:
        while not stop["flag"]:
            time.sleep(0.2)
    finally:
        server.stop()
        store.close()
    return 0


def cmd_process(args) -> int:
    store = RawStore(Path(args.store))
    try:
        records = process_range(store, args.station, parse_when(args.t_from),
                                parse_when(args.t_to))
    finally:
        store.close()
    _write_lines(Path(args.out), hourly_csv_lines(records))
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "process",
                   vars(args) | {"func": None}, [args.out])
    print(f"wrote {len(records)} hourly records to {args.out}")
    return 0


def _report_row(sensor: str, stage: str, model: str, rep) -> str:
    return (f"{sensor},{stage},{model},{rep.n},{rep.r2:.6f},{rep.mse:.6f},"
            f"{rep.rmse:.6f},{rep.pcc:.6f},{rep.t_value:.4f},"
            f"{rep.p_value:.6g},{significance_code(rep.p_value)}\n")


SUMMARY_HEADER = ("sensor,stage,model,n,r2,mse,rmse,pcc,t_value,p_value,"
                  "significance\n")


def cmd_evaluate(args) -> int:
    data = parse_paired_csv(Path(args.pairs).read_text(), args.sensor)
    rep = build_report(data.lcaws, data.pws)
    out = Path(args.out)
    if out.suffix == ".csv":
        _write_lines(out, [SUMMARY_HEADER,
                           _report_row(args.sensor, "raw", "raw", rep)])
    else:
        doc = {"sensor": args.sensor, "stage": "raw"} | rep.as_dict()
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "evaluate",
                   vars(args) | {"func": None}, [args.out])
    print(f"{args.sensor}: R2={rep.r2:.4f} MSE={rep.mse:.4f} "
          f"RMSE={rep.rmse:.4f} p={rep.p_value:.4g}")
    return 0


RANKING_HEADER = "sensor,model,rank,r2_mean,r2_sd,t_value,p_value,significance\n"


def ranking_lines(sensor: str, rows) -> list[str]:
    lines = []
    for row in rows:
        if row.t_value is None:
            t_text, p_text, sig = "", "", ("tie" if row.tie else "")
        else:
            t_text = f"{row.t_value:.4f}"
            p_text = f"{row.p_value:.6g}"
            sig = significance_code(row.p_value)
        lines.append(f"{sensor},{row.kind},{row.rank},{row.r2_mean:.10g},"
                     f"{row.r2_sd:.10g},{t_text},{p_text},{sig}\n")
    return lines


def cmd_calibrate(args) -> int:
    data = parse_paired_csv(Path(args.pairs).read_text(), args.sensor)
    base = default_candidates(n_trees=args.forest_trees)
    outputs = [args.out]
    if args.mode == "experiments":
        kinds = args.kinds.split(",") if args.kinds != "all" else list(KINDS)
        seeds = list(range(1, args.seeds + 1))
        results = run_experiments(data, kinds, seeds, base=base,
                                  n_folds=args.folds)
        baseline = {}
        for seed in seeds:
            out = results[(kinds[0], seed)]
            baseline[seed] = r2(data.pws[out.test_idx], data.lcaws[out.test_idx])
        rows = rank_models(results, baseline_r2=baseline)
        _write_lines(Path(args.out),
                     [RANKING_HEADER] + ranking_lines(args.sensor, rows))
        print(f"ranked {len(rows)} models over {len(seeds)} seeds "
              f"-> {args.out}")
    else:
        if args.model != "best":
            base = [c for c in base if c.kind == args.model]
            if not base:
                raise ValueError(f"unknown model kind {args.model!r}")
        n = len(data)
        fc = final_correction(data, base=base, n_folds=args.folds,
                              seed=args.seed,
                              train_fraction=_train_fraction(
                                  args.train_days, n))
        lines = ["hour_start,raw,corrected,reference\n"]
        for i, row in enumerate(fc.test_idx):
            lines.append(
                f"{data.hours[row].strftime('%Y-%m-%dT%H:%M:%SZ')},"
                f"{data.lcaws[row]:.6f},{fc.yhat[i]:.6f},{data.pws[row]:.6f}\n")
        _write_lines(Path(args.out), lines)
        if args.model_out:
            save_model(fc.model, args.model_out)
            outputs.append(args.model_out)
        print(f"{args.sensor}: raw R2={fc.raw_metrics.r2:.4f} -> "
              f"corrected R2={fc.corrected_metrics.r2:.4f} "
              f"(RMSE {fc.raw_metrics.rmse:.4f} -> "
              f"{fc.corrected_metrics.rmse:.4f})")
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "calibrate",
                   vars(args) | {"func": None}, outputs)
    return 0


def _timeseries_lines(per_sensor: dict[str, dict[str, list[HourlyRecord]]]
                      ) -> list[str]:
    lines = ["sensor,hour,source,value\n"]
    for sensor in SENSORS:
        for source, records in per_sensor[sensor].items():
            for rec in records:
                lines.append(
                    f"{sensor},{rec.hour_start.strftime('%Y-%m-%dT%H:%M:%SZ')},"
                    f"{source},{rec.value(sensor):.6f}\n")
    return lines


def _scatter_lines(paired_by_sensor) -> list[str]:
    lines = ["sensor,lcaws,pws\n"]
    for sensor in SENSORS:
        data = paired_by_sensor[sensor]
        for i in range(len(data)):
            lines.append(f"{sensor},{data.lcaws[i]:.6f},{data.pws[i]:.6f}\n")
    return lines


def cmd_report(args) -> int:
    for path in (args.lcaws, args.pws):
        if not Path(path).exists():
            raise MissingInput(f"input {path} does not exist")
    lcaws = parse_hourly_csv(Path(args.lcaws).read_text())
    pws = parse_hourly_csv(Path(args.pws).read_text())
    paired_by_sensor = {s: pair_hourly(lcaws, pws, s) for s in SENSORS}
    if any(len(d) == 0 for d in paired_by_sensor.values()):
        raise MissingInput("no overlapping hours between the two series")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    series: dict[str, dict[str, list[HourlyRecord]]] = {
        s: {"lcaws": lcaws, "pws": pws} for s in SENSORS}
    summary = [SUMMARY_HEADER]
    for s in SENSORS:
        data = paired_by_sensor[s]
        summary.append(_report_row(s, "raw", "raw",
                                   build_report(data.lcaws, data.pws)))
    _write_lines(out_dir / "timeseries.csv", _timeseries_lines(series))
    _write_lines(out_dir / "scatter.csv", _scatter_lines(paired_by_sensor))
    _write_lines(out_dir / "summary.csv", summary)
    outputs = ["timeseries.csv", "scatter.csv", "summary.csv"]
    write_manifest(out_dir / "manifest.json", "report",
                   vars(args) | {"func": None}, outputs)
    print(f"report written under {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# end-to-end orchestration

E2E_FLAG_NAMES = ("scenario", "seed", "days", "start", "distortion",
                  "station_id", "batch_size", "rank_sensor", "rank_seeds",
                  "forest_trees", "folds", "train_days")


def cmd_e2e(args) -> int:
    if args.from_manifest:
        doc = json.loads(Path(args.from_manifest).read_text())
        flags = doc["flags"]
        for name in E2E_FLAG_NAMES:
            setattr(args, name, flags[name])
    work = Path(args.workdir)
    work.mkdir(parents=True, exist_ok=True)
    start = parse_when(args.start)
    profile = load_profile(args.distortion)
    n_minutes = args.days * 1440

    log.info("e2e: simulating %d days of %r", args.days, args.scenario)
    # one warm-up minute so the first real hour has its bridging interval
    trace = gen_weather(args.seed, start - timedelta(minutes=1),
                        n_minutes + 1, args.scenario)
    pws_hourly = emit_reference_hourly(trace[1:])
    _write_lines(work / "hourly_pws.csv", hourly_csv_lines(pws_hourly))

    log.info("e2e: station -> server over loopback")
    store = RawStore(work / "store")
    server = IngestServer(store).start()
    try:
        sensors = SimulatedSensors(trace, profile)
        cfg = ClientConfig(station_id=args.station_id,
                           spool_dir=work / "spool",
                           server_addr=server.address,
                           batch_size=args.batch_size)
        client = StationClient(cfg, sensors, VirtualClock(trace[0].t_ts))
        client.run(n_minutes + 1)
        for _ in range(100):
            if not client.spool.pending():
                break
            client.clock.sleep(5.0)
            client.pump()
        if client.spool.pending():
            raise RuntimeError("loopback delivery did not drain")
    finally:
        server.stop()

    log.info("e2e: processing %d raw samples", store.sample_count(args.station_id))
    t_end = start + timedelta(days=args.days)
    lcaws_hourly = process_range(store, args.station_id,
                                 floor_hour(start - timedelta(minutes=1)),
                                 t_end)
    store.close()
    _write_lines(work / "hourly_lcaws.csv", hourly_csv_lines(lcaws_hourly))

    paired = {s: pair_hourly(lcaws_hourly, pws_hourly, s) for s in SENSORS}
    for s in SENSORS:
        _write_lines(work / "paired" / f"{s.lower()}.csv",
                     paired_csv_lines(paired[s]))

    base = default_candidates(n_trees=args.forest_trees)
    outputs = ["hourly_pws.csv", "hourly_lcaws.csv", "store/raw.log"]
    outputs += [f"paired/{s.lower()}.csv" for s in SENSORS]

    ranking_rows = []
    if args.rank_seeds > 0:
        log.info("e2e: ranking learners on %s over %d seeds",
                 args.rank_sensor, args.rank_seeds)
        seeds = list(range(1, args.rank_seeds + 1))
        results = run_experiments(paired[args.rank_sensor], list(KINDS), seeds,
                                  base=base, n_folds=args.folds)
        baseline = {}
        data = paired[args.rank_sensor]
        for seed in seeds:
            out = results[(list(KINDS)[0], seed)]
            baseline[seed] = r2(data.pws[out.test_idx], data.lcaws[out.test_idx])
        ranking_rows = rank_models(results, baseline_r2=baseline)
        _write_lines(work / "ranking.csv",
                     [RANKING_HEADER] + ranking_lines(args.rank_sensor,
                                                      ranking_rows))
        outputs.append("ranking.csv")

    log.info("e2e: chronological correction on every sensor")
    fraction = _train_fraction(args.train_days, len(paired["AT"]))
    summary = [SUMMARY_HEADER]
    corrected_lines = ["sensor,hour_start,raw,corrected,reference\n"]
    for s in SENSORS:
        fc = final_correction(paired[s], base=base, n_folds=args.folds,
                              seed=args.seed, train_fraction=fraction)
        save_model(fc.model, _ensured(work / "models" / f"{s.lower()}.json"))
        summary.append(_report_row(s, "raw", "raw", fc.raw_metrics))
        best = max(fc.model.meta["weights"], key=fc.model.meta["weights"].get)
        summary.append(_report_row(s, "corrected", best, fc.corrected_metrics))
        data = paired[s]
        for i, row in enumerate(fc.test_idx):
            corrected_lines.append(
                f"{s},{data.hours[row].strftime('%Y-%m-%dT%H:%M:%SZ')},"
                f"{data.lcaws[row]:.6f},{fc.yhat[i]:.6f},{data.pws[row]:.6f}\n")
    _write_lines(work / "corrected.csv", corrected_lines)
    _write_lines(work / "report" / "summary.csv", summary)
    _write_lines(work / "report" / "timeseries.csv", _timeseries_lines(
        {s: {"lcaws": lcaws_hourly, "pws": pws_hourly} for s in SENSORS}))
    _write_lines(work / "report" / "scatter.csv", _scatter_lines(paired))
    outputs += ["corrected.csv", "report/summary.csv", "report/timeseries.csv",
                "report/scatter.csv"]
    outputs += [f"models/{s.lower()}.json" for s in SENSORS]

    flags = {name: getattr(args, name) for name in E2E_FLAG_NAMES}
    write_manifest(work / "manifest.json", "e2e", flags, sorted(outputs))
    print(f"e2e complete under {work}")
    return 0


def _ensured(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _train_fraction(train_days: int, n_rows: int) -> float:
    """Chronological boundary at train_days of hourly rows, falling back to
    the 60% proportion when the series is shorter than the requested split."""
    n_train = train_days * 24
    if not 2 <= n_train <= n_rows - 2:
        return 0.6
    return n_train / n_rows


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wxpipe", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="generate ground-truth weather")
    sim.add_argument("--scenario", default="rainy-season")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--minutes", type=int, required=True)
    sim.add_argument("--start", default="2019-03-01")
    sim.add_argument("--out", required=True)
    sim.add_argument("--hourly-out", dest="hourly_out", default=None)
    sim.set_defaults(func=cmd_simulate)

    st = sub.add_parser("station", help="run the datalogger client")
    st.add_argument("--server", default=None, help="HOST:PORT")
    st.add_argument("--station-id", dest="station_id", default="LCAWS-01")
    st.add_argument("--batch-size", dest="batch_size", type=int, default=10)
    st.add_argument("--period", default="60s")
    st.add_argument("--spool", default="spool")
    st.add_argument("--sim-scenario", dest="sim_scenario", default=None)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--minutes", type=int, default=60)
    st.add_argument("--start", default="2019-03-01")
    st.add_argument("--profile", default="identity")
    st.add_argument("--accel", action="store_true",
                    help="virtual clock: run sampling periods instantly")
    st.add_argument("--warmup", action="store_true",
                    help="acquire one extra sample before the start hour")
    st.set_defaults(func=cmd_station)

    sv = sub.add_parser("server", help="run the ingestion server")
    sv.add_argument("--bind", default="0.0.0.0:7700")
    sv.add_argument("--store", default="store")
    sv.set_defaults(func=cmd_server)

    pr = sub.add_parser("process", help="raw store -> hourly CSV")
    pr.add_argument("--store", required=True)
    pr.add_argument("--station", required=True)
    pr.add_argument("--from", dest="t_from", required=True)
    pr.add_argument("--to", dest="t_to", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_process)

    ev = sub.add_parser("evaluate", help="metrics for a paired CSV")
    ev.add_argument("--pairs", required=True)
    ev.add_argument("--sensor", default="AT", choices=SENSORS)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_evaluate)

    ca = sub.add_parser("calibrate", help="experiments ranking or final fit")
    ca.add_argument("--pairs", required=True)
    ca.add_argument("--sensor", required=True, choices=SENSORS)
    ca.add_argument("--mode", choices=("experiments", "final"),
                    default="experiments")
    ca.add_argument("--seeds", type=int, default=100)
    ca.add_argument("--seed", type=int, default=0, help="final-mode fit seed")
    ca.add_argument("--kinds", default="all")
    ca.add_argument("--folds", type=int, default=10)
    ca.add_argument("--forest-trees", dest="forest_trees", type=int, default=100)
    ca.add_argument("--train-days", dest="train_days", type=int, default=18)
    ca.add_argument("--model", default="best")
    ca.add_argument("--model-out", dest="model_out", default=None)
    ca.add_argument("--out", required=True)
    ca.set_defaults(func=cmd_calibrate)

    re = sub.add_parser("report", help="plot data and summary tables")
    re.add_argument("--lcaws", required=True)
    re.add_argument("--pws", required=True)
    re.add_argument("--out-dir", dest="out_dir", required=True)
    re.set_defaults(func=cmd_report)

    ee = sub.add_parser("e2e", help="simulate -> transport -> process -> "
                        "calibrate -> report, reproducibly")
    ee.add_argument("--scenario", default="rainy-season")
    ee.add_argument("--seed", type=int, default=3)
    ee.add_argument("--days", type=int, default=30)
    ee.add_argument("--start", default="2019-03-01")
    ee.add_argument("--distortion", default="default",
                    help="identity, default, or a profile JSON path")
    ee.add_argument("--station-id", dest="station_id", default="LCAWS-01")
    ee.add_argument("--batch-size", dest="batch_size", type=int, default=10)
    ee.add_argument("--workdir", required=True)
    ee.add_argument("--rank-sensor", dest="rank_sensor", default="WS",
                    choices=SENSORS)
    ee.add_argument("--rank-seeds", dest="rank_seeds", type=int, default=100)
    ee.add_argument("--forest-trees", dest="forest_trees", type=int, default=25)
    ee.add_argument("--folds", type=int, default=10)
    ee.add_argument("--train-days", dest="train_days", type=int, default=18)
    ee.add_argument("--from-manifest", dest="from_manifest", default=None)
    ee.set_defaults(func=cmd_e2e)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingInput as exc:
        print(f"wxpipe: missing input: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        print(f"wxpipe: data error: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # pragma: no cover - defensive
        import traceback
        traceback.print_exc()
        print(f"wxpipe: internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
