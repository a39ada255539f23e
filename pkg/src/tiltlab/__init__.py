"""Desk-scale simulator for code-length dynamics of fine-tuning by exponential tilting."""
from __future__ import annotations

__version__ = "0.1.0"
