"""wxpipe: simulated low-cost weather station pipeline with ML calibration."""

from .records import (
    HourlyRecord, PairedDataset, RawSample, SampleBatch, SENSORS,
    parse_batch, serialize_batch,
)
from .processing import ProcessingConfig, process_range, summarize_hour
from .simulate import (
    DistortionProfile, SimulatedSensors, WeatherMinute,
    emit_reference_hourly, gen_weather,
)
from .station import ClientConfig, StationClient, SystemClock, VirtualClock
from .server import IngestServer, RawStore
from .metrics import MetricsReport, build_report
from .calibration import (
    final_correction, learning_pipeline, pair_hourly, rank_models,
    run_experiments, super_learner,
)

__version__ = "0.1.0"

__all__ = [
    "HourlyRecord", "PairedDataset", "RawSample", "SampleBatch", "SENSORS",
    "parse_batch", "serialize_batch", "ProcessingConfig", "process_range",
    "summarize_hour", "DistortionProfile", "SimulatedSensors", "WeatherMinute",
    "emit_reference_hourly", "gen_weather", "ClientConfig", "StationClient",
    "SystemClock", "VirtualClock", "IngestServer", "RawStore",
    "MetricsReport", "build_report", "final_correction", "learning_pipeline",
    "pair_hourly", "rank_models", "run_experiments", "super_learner",
    "__version__",
]
