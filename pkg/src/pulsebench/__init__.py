"""pulsebench: desk-scale rPPG pipeline, losses, model and benchmark harness."""

__version__ = "0.1.0"
