"""Experiment orchestration: configs, seeded runs, metrics, tables and plot data."""
