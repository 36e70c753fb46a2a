from .config import ExperimentConfig, load_config, parse_config
from .reports import emit_reports
from .runner import RunResult, run_baseline_erm, run_experiment, sweep

__all__ = ["ExperimentConfig", "RunResult", "emit_reports", "load_config", "parse_config",
           "run_baseline_erm", "run_experiment", "sweep"]
