"""Policy-guided gradient search for offline black-box optimization."""

__version__ = "0.1.0"
