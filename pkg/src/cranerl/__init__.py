"""Reinforcement-learning grasping simulator for a forestry crane."""

__version__ = "0.1.0"
