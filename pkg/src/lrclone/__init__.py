# src/lrclone/__init__.py
"""
lrclone - low-rank clone distillation of small language models.

"""

__version__ = "0.1.0"

from .cli import app

__all__ = ["app"]
