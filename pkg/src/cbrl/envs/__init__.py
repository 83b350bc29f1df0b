"""Benchmark problem families and small seeded test instances."""
from __future__ import annotations
