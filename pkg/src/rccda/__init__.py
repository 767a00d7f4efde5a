"""Resource-constrained model updates for drifting data streams."""

__version__ = "0.1.0"
