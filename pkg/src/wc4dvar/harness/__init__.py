"""Experiment harness: configuration, commands, output files and the CLI."""

from .commands import COMMANDS, CommandOutput, cmd_assimilate, cmd_estimate_eig, cmd_gap_study, cmd_place_sensors
from .config import ConfigError, config_hash, load_config, resolve

__all__ = [
    "COMMANDS",
    "CommandOutput",
    "ConfigError",
    "cmd_assimilate",
    "cmd_estimate_eig",
    "cmd_gap_study",
    "cmd_place_sensors",
    "config_hash",
    "load_config",
    "resolve",
]
