"""
Effective bandwidth and GPU utilization profiles
"""

__version__ = "1.0.0"
