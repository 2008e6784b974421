"""Two-stage RGB-D curriculum pre-training at desk scale."""

__version__ = "0.1.0"
