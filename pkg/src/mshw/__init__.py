"""Many-server queues with abandonment in heavy traffic."""

__version__ = "0.1.0"
