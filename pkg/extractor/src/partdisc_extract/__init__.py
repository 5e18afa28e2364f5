"""Image-folder feature extraction into the partdisc binary container format."""

__version__ = "0.1.0"
