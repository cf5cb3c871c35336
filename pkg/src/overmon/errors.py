"""Shared exception base so the CLI can map failures to exit codes."""

from __future__ import annotations


class OvermonError(Exception):
    """Base class for all domain errors raised by this package."""
