"""Four-beat piano-roll embeddings with numpy-only neural networks."""

__version__ = "0.1.0"
