"""Data-poisoning attacks and signed, Merkle-committed pipeline defenses at desk scale."""
from __future__ import annotations

__version__ = "0.1.0"
