"""Multi-agent PPO trained over agent neighborhoods (large neighborhood search)."""

from __future__ import annotations

__version__ = "0.1.0"
