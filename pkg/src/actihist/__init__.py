"""Histogram summaries of accelerometer profiles and penalised scalar-on-function regression."""

__version__ = "0.1.0"
