"""Concept-prototype visual prompt tuning at desk scale."""

__version__ = "0.1.0"
