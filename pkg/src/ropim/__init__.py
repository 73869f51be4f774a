"""Random orthogonal projection image modeling at desk scale."""

__version__ = "0.1.0"
