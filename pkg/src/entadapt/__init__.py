"""Test-time speaker adaptation by N-best entropy minimisation, at desk scale."""

__version__ = "0.1.0"
