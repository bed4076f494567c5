"""Experiment harness: configuration, trace ingestion, scenarios, plot tables, CLI."""

from .config import DEFAULTS, SCENARIOS, apply_overrides, config_hash, load_config
from .plots import SCHEMAS, emit_plot_data
from .scenarios import ScenarioResult, recovery_epochs, run_scenario
from .traces import TraceError, ingest_trace, read_trace

__all__ = [
    "DEFAULTS", "SCENARIOS", "SCHEMAS", "ScenarioResult", "TraceError", "apply_overrides",
    "config_hash", "emit_plot_data", "ingest_trace", "load_config", "read_trace",
    "recovery_epochs", "run_scenario",
]
