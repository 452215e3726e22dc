"""Evaluation harness for iterative code self-repair with execution feedback."""

__version__ = "0.1.0"
