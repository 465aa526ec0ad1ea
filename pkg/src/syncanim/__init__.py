"""Audio-driven avatar pipeline: generators, neural fields, synthetic scenes, metrics."""

__version__ = "0.1.0"
