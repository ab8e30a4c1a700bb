"""Slate-recommendation RL toolkit: logs, simulation, user models, data
understanding, policy learning and counterfactual evaluation."""
from .catalog import Catalog
from .env import EpisodeConfig, SlateEnv, SlateState, StepResult, page_reward
from .unlock import valid_patterns, validate_feedback

__version__ = "0.1.0"

__all__ = ["Catalog", "EpisodeConfig", "SlateEnv", "SlateState", "StepResult", "page_reward",
           "valid_patterns", "validate_feedback"]
