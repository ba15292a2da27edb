"""
msprompt
Multi-stage prompting for frozen decoder-only language models
"""

__version__ = "1.0.0"
__author__ = "luhtech"
