"""Parameter-space immunization of feed-forward 3D Gaussian generators at desk scale."""

__version__ = "0.1.0"
