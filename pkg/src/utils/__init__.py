"""Scenario configuration and trajectory files."""
