"""grid2point - Relate gridded precipitation return levels to station return levels."""

__version__ = "0.1.0"
