"""Self-supervised blind estimation of room volume and RT60 from noisy speech."""

__version__ = "0.1.0"
