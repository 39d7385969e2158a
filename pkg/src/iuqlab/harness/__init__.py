"""Scenario configuration, forward UQ, envelope checks, reports and the CLI."""

from .config import ScenarioConfig, load_config, parse_config
from .fuq import (Bands, EnvelopeReport, MvnSource, SampleAdjustResult, UniformRanges,
                  envelope_check, forward_uq, sample_adjust_iuq)
from .report import SCHEMA_VERSION, build_report, emit_report
from .runner import Scenario, run_scenario

__all__ = ["ScenarioConfig", "load_config", "parse_config", "Bands", "EnvelopeReport",
           "MvnSource", "SampleAdjustResult", "UniformRanges", "envelope_check", "forward_uq",
           "sample_adjust_iuq", "SCHEMA_VERSION", "build_report", "emit_report", "Scenario",
           "run_scenario"]
