"""Statistical performance monitoring for overlay messaging networks.

Stage I collects per-node metrics, stage II smooths them with scalar Kalman
filters and assembles covariance rows across the network, stage III runs a
belief-propagation-backed least-squares regression to rank likely root
causes, and stage IV suggests (and can apply) corrective resource actions.
A deterministic overlay simulator drives the whole loop end to end.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import OvermonError

__all__ = ["OvermonError", "__version__"]
