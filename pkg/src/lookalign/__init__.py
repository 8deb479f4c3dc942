"""CAM attention alignment against per-image teacher maps on biased MNIST variants."""

__version__ = "0.1.0"
