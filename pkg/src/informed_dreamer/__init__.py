"""Informed Dreamer: model-based RL that learns its world model from privileged training information."""

__version__ = "0.1.0"
