"""Soft Q imitation learning, behavioral cloning and regularized BC on gridworlds."""

__version__ = "0.1.0"
