"""Long-tailed partial-label learning laboratory (numpy only)."""

__version__ = "0.1.0"
