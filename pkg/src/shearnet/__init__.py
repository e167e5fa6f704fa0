"""Single-push shear-wave elastography reconstruction with SHEAR-net."""

__version__ = "0.1.0"
