"""Desk-scale multitask self-instructed vulnerability detection pipeline."""

__version__ = "0.1.0"
