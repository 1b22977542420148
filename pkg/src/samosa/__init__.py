"""Multi-architecture Linux sandbox orchestration with synchronized side-channel capture."""

__version__ = "0.1.0"
