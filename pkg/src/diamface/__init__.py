"""Classification-based embedding learning on shallow two-domain data."""

__version__ = "0.1.0"
