import json

import pytest

from wxpipe.cli import main, parse_addr, parse_period, parse_when
from wxpipe.processing import parse_hourly_csv
from wxpipe.server import IngestServer, RawStore

from conftest import T0


class TestParsers:
    def test_parse_when(self):
        assert parse_when("2019-03-01") == T0
        assert parse_when("2019-03-01T13:05:00Z") == T0.replace(hour=13, minute=5)
        with pytest.raises(ValueError):
            parse_when("yesterday")

    def test_parse_period(self):
        assert parse_period("60s") == 60.0
        assert parse_period("2m") == 120.0
        assert parse_period("1.5") == 1.5

    def test_parse_addr(self):
        assert parse_addr("127.0.0.1:7700") == ("127.0.0.1", 7700)
        with pytest.raises(ValueError):
            parse_addr("7700")


class TestSimulateCmd:
    def test_writes_trace_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "truth.csv"
        hourly = tmp_path / "ref.csv"
        rc = main(["simulate", "--seed", "5", "--minutes", "120",
                   "--out", str(out), "--hourly-out", str(hourly)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "t_ts,ap,at,rh,rain_rate,wind_speed,wind_dir"
        assert len(lines) == 121
        assert len(parse_hourly_csv(hourly.read_text())) == 2
        manifest = json.loads((tmp_path / "truth.manifest.json").read_text())
        assert manifest["subcommand"] == "simulate"
        assert manifest["flags"]["seed"] == 5

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", "--seed", "9", "--minutes", "60", "--out", str(a)])
        main(["simulate", "--seed", "9", "--minutes", "60", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_unknown_scenario_is_data_error(self, tmp_path):
        rc = main(["simulate", "--scenario", "hurricane", "--minutes", "10",
                   "--out", str(tmp_path / "x.csv")])
        assert rc == 3


class TestStationProcessFlow:
    def test_station_to_hourly(self, tmp_path, capsys):
        store = RawStore(tmp_path / "store")
        server = IngestServer(store).start()
        addr = f"{server.address[0]}:{server.address[1]}"
        try:
            rc = main(["station", "--server", addr, "--station-id", "CLI1",
                       "--spool", str(tmp_path / "spool"),
                       "--sim-scenario", "calm", "--seed", "2",
                       "--minutes", "180", "--accel", "--warmup"])
            assert rc == 0
        finally:
            server.stop()
            store.close()
        assert "pending=0" in capsys.readouterr().out

        out = tmp_path / "hourly.csv"
        rc = main(["process", "--store", str(tmp_path / "store"),
                   "--station", "CLI1", "--from", "2019-03-01",
                   "--to", "2019-03-01T03:00:00Z", "--out", str(out)])
        assert rc == 0
        records = parse_hourly_csv(out.read_text())
        assert len(records) == 3
        assert all(r.n_samples == 60 for r in records)

    def test_station_requires_sim_backend(self, tmp_path):
        rc = main(["station", "--spool", str(tmp_path / "sp")])
        assert rc == 2

    def test_spool_env_override(self, tmp_path, monkeypatch):
        override = tmp_path / "other-spool"
        monkeypatch.setenv("WXPIPE_SPOOL", str(override))
        rc = main(["station", "--spool", str(tmp_path / "ignored"),
                   "--sim-scenario", "calm", "--minutes", "10", "--accel"])
        assert rc == 0
        assert override.exists() and not (tmp_path / "ignored").exists()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    work = tmp_path_factory.mktemp("e2e")
    rc = main(["e2e", "--workdir", str(work), "--days", "4",
               "--rank-seeds", "4", "--forest-trees", "10"])
    assert rc == 0
    return work


class TestEndToEnd:
    def test_outputs_exist(self, workdir):
        for rel in ("hourly_lcaws.csv", "hourly_pws.csv", "ranking.csv",
                    "corrected.csv", "report/summary.csv",
                    "report/timeseries.csv", "report/scatter.csv",
                    "manifest.json", "store/raw.log", "paired/ws.csv",
                    "models/ws.json"):
            assert (workdir / rel).exists(), rel

    def test_summary_improves_digital_sensors(self, workdir):
        rows = {}
        for ln in (workdir / "report" / "summary.csv").read_text().splitlines()[1:]:
            f = ln.split(",")
            rows[(f[0], f[1])] = float(f[4])
        for sensor in ("AP", "AT", "RH", "WS"):
            assert rows[(sensor, "corrected")] >= rows[(sensor, "raw")], sensor

    def test_scatter_rows_match_paired_hours(self, workdir):
        paired = (workdir / "paired" / "at.csv").read_text().splitlines()
        scatter = [ln for ln in
                   (workdir / "report" / "scatter.csv").read_text().splitlines()
                   if ln.startswith("AT,")]
        assert len(scatter) == len(paired) - 1

    def test_evaluate_and_calibrate_cmds(self, workdir, tmp_path):
        report = tmp_path / "ws.json"
        rc = main(["evaluate", "--pairs", str(workdir / "paired" / "ws.csv"),
                   "--sensor", "WS", "--out", str(report)])
        assert rc == 0
        doc = json.loads(report.read_text())
        assert set(doc) >= {"sensor", "r2", "mse", "rmse", "p_value"}

        ranking = tmp_path / "rank.csv"
        rc = main(["calibrate", "--pairs", str(workdir / "paired" / "ws.csv"),
                   "--sensor", "WS", "--mode", "experiments", "--seeds", "3",
                   "--kinds", "lm,mlr", "--forest-trees", "5",
                   "--out", str(ranking)])
        assert rc == 0
        lines = ranking.read_text().splitlines()
        assert lines[0].startswith("sensor,model,rank")
        assert len(lines) == 4   # lm, mlr, raw baseline

        corrected = tmp_path / "corrected.csv"
        model_out = tmp_path / "model.json"
        rc = main(["calibrate", "--pairs", str(workdir / "paired" / "ws.csv"),
                   "--sensor", "WS", "--mode", "final", "--train-days", "2",
                   "--forest-trees", "5", "--model-out", str(model_out),
                   "--out", str(corrected)])
        assert rc == 0
        assert corrected.read_text().startswith("hour_start,raw,corrected,reference")
        assert json.loads(model_out.read_text())["kind"] == "ensemble"

    def test_report_cmd(self, workdir, tmp_path):
        out_dir = tmp_path / "rpt"
        rc = main(["report", "--lcaws", str(workdir / "hourly_lcaws.csv"),
                   "--pws", str(workdir / "hourly_pws.csv"),
                   "--out-dir", str(out_dir)])
        assert rc == 0
        header = (out_dir / "timeseries.csv").read_text().splitlines()[0]
        assert header == "sensor,hour,source,value"
        assert (out_dir / "scatter.csv").read_text().splitlines()[0] == \
            "sensor,lcaws,pws"

    def test_identity_distortion_leaves_little_to_correct(self, tmp_path):
        work = tmp_path / "ident"
        rc = main(["e2e", "--workdir", str(work), "--days", "2",
                   "--rank-seeds", "0", "--forest-trees", "5",
                   "--distortion", "identity"])
        assert rc == 0
        rows = {}
        for ln in (work / "report" / "summary.csv").read_text().splitlines()[1:]:
            f = ln.split(",")
            rows[(f[0], f[1])] = float(f[4])
        for sensor in ("AP", "AT", "RH"):
            assert rows[(sensor, "raw")] > 0.999, sensor
            assert abs(rows[(sensor, "corrected")] - rows[(sensor, "raw")]) < 1e-3

    def test_report_missing_input(self, tmp_path):
        rc = main(["report", "--lcaws", str(tmp_path / "none.csv"),
                   "--pws", str(tmp_path / "none2.csv"),
                   "--out-dir", str(tmp_path / "o")])
        assert rc == 3

    def test_report_no_overlap_is_data_error(self, workdir, tmp_path):
        lc = workdir / "hourly_lcaws.csv"
        shifted = tmp_path / "shifted.csv"
        lines = lc.read_text().splitlines(keepends=True)
        moved = [lines[0]] + [ln.replace("2019-03", "2021-07", 1)
                              for ln in lines[1:]]
        shifted.write_text("".join(moved))
        rc = main(["report", "--lcaws", str(shifted),
                   "--pws", str(workdir / "hourly_pws.csv"),
                   "--out-dir", str(tmp_path / "o2")])
        assert rc == 3


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as err:
        main(["process", "--store", "x"])   # missing required flags
    assert err.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as err:
        main(["--version"])
    assert err.value.code == 0
