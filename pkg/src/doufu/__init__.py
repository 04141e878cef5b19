"""Double-fusion trajectory representation learning at desk scale."""

__version__ = "0.1.0"
