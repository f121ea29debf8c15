"""Experiment configuration, CLI, persistence and reports."""
from gadlab.runner.config import config_hash, output_dir, parse_config, render_config
from gadlab.runner.pipeline import ExperimentConfig, build_bundle, run_single
from gadlab.runner.report import write_report
from gadlab.seqmodel import load_checkpoint, save_checkpoint

__all__ = ["ExperimentConfig", "build_bundle", "config_hash", "load_checkpoint", "output_dir", "parse_config",
           "render_config", "run_single", "save_checkpoint", "write_report"]
