"""Part-aware generalized category discovery on pre-extracted feature tensors."""

__version__ = "0.1.0"
