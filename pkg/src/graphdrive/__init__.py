"""Graph-attention driving policy pipeline on a deterministic 2D traffic microsimulator."""

__version__ = "0.1.0"
