"""
Backend package for the LLM training performance tuner
"""

__version__ = "1.0.0"
