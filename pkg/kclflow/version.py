"""
Version information for kclflow.
"""

__version__ = "1.0.0"
