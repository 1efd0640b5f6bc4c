"""Synthetic models and scenes, reference oracle, experiment runner and CLI."""

from .oracle import OracleResult, oracle_forward
from .synth import ScriptedSchedule, gen_model, gen_scene, make_decay_schedule

__all__ = ["OracleResult", "ScriptedSchedule", "gen_model", "gen_scene", "make_decay_schedule", "oracle_forward"]
