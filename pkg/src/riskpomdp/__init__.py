"""Offline risk-sensitive POMDP pipeline for the Firefighter Robot Game."""

__version__ = "0.1.0"
