"""Preference-based RL from AI feedback for multi-objective traffic signal control."""

__version__ = "0.1.0"
