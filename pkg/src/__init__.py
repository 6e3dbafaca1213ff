"""
QuakeGrid - mid-term local earthquake forecasting on a spatial grid.
"""

__version__ = "0.1.0"
