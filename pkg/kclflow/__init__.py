"""
kclflow: power-flow surrogates with Kirchhoff's Current Law enforced by projection.
"""

from .version import __version__

__all__ = ["__version__"]
