"""HTTP service exposing model building, cost accounting, gradient
diagnostics, saturation sweeps, and training runs."""

from .app import create_app

__all__ = ["create_app"]
