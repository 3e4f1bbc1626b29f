"""Policy extraction from black-box continuous-control policies without environment access."""

__version__ = "0.1.0"
