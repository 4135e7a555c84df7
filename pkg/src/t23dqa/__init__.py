"""Fine-grained quality scoring for text-to-3D generations."""

__version__ = "0.1.0"
