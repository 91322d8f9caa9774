"""Multi-modal supervised domain adaptation for visual question answering, on a numpy autodiff engine."""

__version__ = "0.1.0"
